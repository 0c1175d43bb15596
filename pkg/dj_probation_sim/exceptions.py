"""
Exceptions raised by dj-probation-sim.

Configuration problems derive from Django's ImproperlyConfigured so they read
like any other settings mistake; numerical and contract violations derive from
ValueError.
"""

from django.core.exceptions import ImproperlyConfigured


class CoefficientError(ImproperlyConfigured):
    """Unknown covariate or level, or an invalid coefficient table."""


class IngestionError(ImproperlyConfigured):
    """A cohort file could not be read; the message names the offending row."""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ScenarioError(ImproperlyConfigured):
    """A scenario file failed to parse or validate."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DomainError(ValueError):
    """An argument is outside the domain of the operation."""


class CalibrationError(ValueError):
    """The baseline hazard could not be calibrated to the requested anchor."""


class WindowError(ValueError):
    """A trajectory is too short for the requested reporting window."""


class AlignmentError(ValueError):
    """Policy and null reports do not cover the same grid or replications."""


class PolicyContractError(ValueError):
    """A treatment assignment violates the capacity constraint or eligibility."""


class SimulationOrderError(RuntimeError):
    """The event loop observed an event out of chronological order."""

    def __init__(self, message, event=None):
        self.event = event
        if event is not None:
            message = f"{message} (event={event!r})"
        super().__init__(message)
