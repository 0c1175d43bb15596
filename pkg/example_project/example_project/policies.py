"""
Example treatment policy for exercising full module path policy resolution.

Registered through ``DJ_PROBATION_SIM_SETTINGS["POLICY_EXTENSIONS"]`` under
the kind ``example-oldest-first``.
"""

from dj_probation_sim.policy import TreatmentPolicy


class OldestFirstPolicy(TreatmentPolicy):
    """Oldest candidates first; ties go to the lower individual id."""

    def priority(self, candidate):
        return (-candidate.age_days, candidate.id)
