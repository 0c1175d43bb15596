import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional


class EventKind(str, Enum):
    ARRIVAL = "arrival"
    OFFENSE = "offense"
    END_PROBATION = "end-probation"
    EXIT = "exit"
    RETURN = "return"


@dataclass(frozen=True, order=True)
class Event:
    """
    A timestamped queue entry. Events order by (time, sequence); ``token`` is
    compared against the individual's generation counter when popped, and a
    mismatch marks the event stale.
    """

    time: float
    sequence: int
    individual_id: Optional[int] = field(default=None, compare=False)
    kind: EventKind = field(default=EventKind.ARRIVAL, compare=False)
    token: int = field(default=0, compare=False)


class EventQueue:
    """Binary heap of events; ties on time pop in insertion order."""

    def __init__(self):
        self._heap: List[Event] = []
        self._sequence = 0

    def push(self, time, kind, individual_id=None, token=0) -> Event:
        event = Event(float(time), self._sequence, individual_id, EventKind(kind), token)
        self._sequence += 1
        heapq.heappush(self._heap, event)
        return event

    def pop(self) -> Event:
        return heapq.heappop(self._heap)

    def peek(self) -> Optional[Event]:
        return self._heap[0] if self._heap else None

    def __len__(self):
        return len(self._heap)

    def __bool__(self):
        return bool(self._heap)
