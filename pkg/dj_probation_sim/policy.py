import logging
from dataclasses import dataclass
from enum import Enum
from importlib import import_module
from typing import FrozenSet, Iterable, Optional, Union

from django.core.exceptions import ImproperlyConfigured

from .conf import get_config
from .hazard import DAYS_PER_YEAR

logger = logging.getLogger(__name__)


class PolicyKind(str, Enum):
    NULL = "null"
    LOW_RISK = "low-risk"
    HIGH_RISK = "high-risk"
    AGE_FIRST_LOW_RISK = "age-first-low-risk"


# Default mapping of policy kinds to policy classes
POLICY_MAP_DEFAULT = {
    PolicyKind.NULL.value: "NullPolicy",
    PolicyKind.LOW_RISK.value: "LowRiskPolicy",
    PolicyKind.HIGH_RISK.value: "HighRiskPolicy",
    PolicyKind.AGE_FIRST_LOW_RISK.value: "AgeFirstLowRiskPolicy",
}


@dataclass(frozen=True)
class Candidate:
    id: int
    risk: float
    age_days: float
    on_probation: bool = True


def get_policy_map():
    """
    The policy registry: POLICY_MAP replaces the defaults outright,
    POLICY_EXTENSIONS adds to whichever map is in effect.
    """
    policy_map = dict(get_config("POLICY_MAP") or POLICY_MAP_DEFAULT)
    policy_map.update(get_config("POLICY_EXTENSIONS") or {})
    return policy_map


def get_policy(kind: Union[str, PolicyKind], **options) -> "TreatmentPolicy":
    """
    Returns an instance of the policy class registered for ``kind``.

    The registered class can be given as:
    - A simple class name (e.g., "LowRiskPolicy") - looked up in this module
    - A full module path (e.g., "myapp.policies.OldestFirstPolicy") - imported dynamically
    """
    kind = kind.value if isinstance(kind, PolicyKind) else str(kind)
    policy_class_name = get_policy_map().get(kind)
    if not policy_class_name:
        raise ImproperlyConfigured(
            f"Unknown policy '{kind}'. Registered policies: "
            + ", ".join(sorted(get_policy_map()))
        )

    if "." in policy_class_name:
        module_path, class_name = policy_class_name.rsplit(".", 1)
        try:
            module = import_module(module_path)
        except ImportError as e:
            raise ImproperlyConfigured(
                f"Failed to import policy class '{policy_class_name}': {e}"
            )
        policy_class = getattr(module, class_name, None)
        if policy_class is None:
            raise ImproperlyConfigured(
                f"Class '{class_name}' not found in module '{module_path}'"
            )
    else:
        policy_class = globals().get(policy_class_name)
        if policy_class is None:
            raise ImproperlyConfigured(f"Policy class '{policy_class_name}' does not exist")

    return policy_class(kind=kind, **options)


class TreatmentPolicy:
    """
    Defines the interface for a treatment-allocation policy. Subclasses rank
    candidates through ``priority``; ``decide`` takes the best-ranked
    on-probation candidates up to the remaining capacity.

    Ties are broken by ascending individual id, so decisions do not depend on
    the order candidates are given in.
    """

    def __init__(self, kind: Optional[str] = None, **options):
        self.kind = kind
        self.options = options

    def priority(self, candidate: Candidate):
        raise NotImplementedError

    def decide(self, candidates: Iterable[Candidate], remaining_capacity: int) -> FrozenSet[int]:
        if remaining_capacity < 0:
            logger.warning(
                "Policy '%s' called with negative remaining capacity %d; assigning nothing",
                self.kind,
                remaining_capacity,
            )
            return frozenset()
        if remaining_capacity == 0:
            return frozenset()
        eligible = sorted(
            (c for c in candidates if c.on_probation), key=self.priority
        )
        return frozenset(c.id for c in eligible[:remaining_capacity])


class NullPolicy(TreatmentPolicy):
    def decide(self, candidates, remaining_capacity):
        return frozenset()


class LowRiskPolicy(TreatmentPolicy):
    def priority(self, candidate):
        return (candidate.risk, candidate.id)


class HighRiskPolicy(TreatmentPolicy):
    def priority(self, candidate):
        return (-candidate.risk, candidate.id)


class AgeFirstLowRiskPolicy(TreatmentPolicy):
    """
    Youngest first, lowest risk within equal ages. With ``bucket_years`` set,
    ages are grouped into buckets of that width before risk breaks the tie.
    """

    def __init__(self, kind=None, bucket_years: Optional[float] = None, **options):
        super().__init__(kind=kind, **options)
        if bucket_years is not None and not bucket_years > 0:
            raise ImproperlyConfigured(f"bucket_years must be > 0, got {bucket_years}")
        self.bucket_years = bucket_years

    def priority(self, candidate):
        age = candidate.age_days
        if self.bucket_years:
            age = int(age // (self.bucket_years * DAYS_PER_YEAR))
        return (age, candidate.risk, candidate.id)


def decide(
    kind: Union[str, PolicyKind],
    candidates: Iterable[Candidate],
    remaining_capacity: int,
    **options,
) -> FrozenSet[int]:
    return get_policy(kind, **options).decide(candidates, remaining_capacity)
