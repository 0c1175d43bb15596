"""
Tests for dj_probation_sim.policy (e.g. get_policy with dotted policy paths).
"""

import itertools

from django.core.exceptions import ImproperlyConfigured
from django.test import SimpleTestCase, override_settings

from dj_probation_sim.policy import (
    AgeFirstLowRiskPolicy,
    Candidate,
    HighRiskPolicy,
    LowRiskPolicy,
    NullPolicy,
    PolicyKind,
    decide,
    get_policy,
    get_policy_map,
)
from example_project.policies import OldestFirstPolicy

YEAR = 365.25


def candidates_from(risks, ages=None):
    ages = ages or [30] * len(risks)
    return [
        Candidate(id=i, risk=risk, age_days=age * YEAR)
        for i, (risk, age) in enumerate(zip(risks, ages))
    ]


class TestDecide(SimpleTestCase):
    def setUp(self):
        self.candidates = candidates_from([0.5, -1.0, 2.0])

    def test_low_risk_takes_lowest(self):
        self.assertEqual(decide(PolicyKind.LOW_RISK, self.candidates, 1), frozenset({1}))

    def test_high_risk_takes_highest(self):
        self.assertEqual(decide(PolicyKind.HIGH_RISK, self.candidates, 1), frozenset({2}))

    def test_age_first_low_risk(self):
        candidates = candidates_from([0.1, 0.9, 0.2], ages=[25, 19, 19])
        self.assertEqual(decide("age-first-low-risk", candidates, 1), frozenset({2}))

    def test_age_buckets(self):
        candidates = candidates_from([0.9, 0.1], ages=[21.0, 24.0])
        self.assertEqual(decide("age-first-low-risk", candidates, 1), frozenset({0}))
        self.assertEqual(
            decide("age-first-low-risk", candidates, 1, bucket_years=5), frozenset({1})
        )

    def test_zero_capacity(self):
        for kind in PolicyKind:
            with self.subTest(kind=kind):
                self.assertEqual(decide(kind, self.candidates, 0), frozenset())

    def test_null_assigns_nothing(self):
        self.assertEqual(decide("null", self.candidates, 10), frozenset())

    def test_negative_capacity_warns(self):
        with self.assertLogs("dj_probation_sim.policy", level="WARNING"):
            self.assertEqual(decide("high-risk", self.candidates, -2), frozenset())

    def test_off_probation_candidates_skipped(self):
        candidates = self.candidates + [Candidate(id=9, risk=5.0, age_days=30 * YEAR, on_probation=False)]
        self.assertEqual(decide("high-risk", candidates, 1), frozenset({2}))

    def test_ties_break_by_id(self):
        candidates = [Candidate(id=i, risk=1.0, age_days=30 * YEAR) for i in (7, 3, 5)]
        self.assertEqual(decide("low-risk", candidates, 2), frozenset({3, 5}))
        self.assertEqual(decide("high-risk", candidates, 2), frozenset({3, 5}))

    def test_selection_bound_and_exchange(self):
        risks = [0.3, -0.2, 1.1, 0.7, -0.9, 0.0, 0.45]
        candidates = candidates_from(risks)
        for capacity in range(0, len(risks) + 2):
            low = decide("low-risk", candidates, capacity)
            high = decide("high-risk", candidates, capacity)
            with self.subTest(capacity=capacity):
                self.assertEqual(len(low), min(capacity, len(risks)))
                self.assertLessEqual(len(high), capacity)
                for chosen, other in itertools.product(low, set(range(len(risks))) - low):
                    self.assertLessEqual(risks[chosen], risks[other])
                for chosen, other in itertools.product(high, set(range(len(risks))) - high):
                    self.assertGreaterEqual(risks[chosen], risks[other])

    def test_order_independent(self):
        candidates = candidates_from([0.3, -0.2, 1.1, 0.7])
        self.assertEqual(
            decide("low-risk", candidates, 2), decide("low-risk", list(reversed(candidates)), 2)
        )


class TestGetPolicy(SimpleTestCase):
    def test_builtin_policies(self):
        expected = {
            "null": NullPolicy,
            "low-risk": LowRiskPolicy,
            "high-risk": HighRiskPolicy,
            "age-first-low-risk": AgeFirstLowRiskPolicy,
        }
        for kind, policy_class in expected.items():
            with self.subTest(kind=kind):
                policy = get_policy(kind)
                self.assertIsInstance(policy, policy_class)
                self.assertEqual(policy.kind, kind)

    def test_loads_policy_via_full_module_path(self):
        """POLICY_EXTENSIONS dotted path resolves through import_module."""
        policy = get_policy("example-oldest-first")
        self.assertIsInstance(policy, OldestFirstPolicy)
        candidates = candidates_from([0.0, 0.0, 0.0], ages=[20, 60, 40])
        self.assertEqual(policy.decide(candidates, 1), frozenset({1}))

    def test_unknown_kind(self):
        with self.assertRaises(ImproperlyConfigured) as ctx:
            get_policy("random")
        self.assertIn("Unknown policy 'random'", str(ctx.exception))

    @override_settings(
        DJ_PROBATION_SIM_SETTINGS={"POLICY_EXTENSIONS": {"broken": "example_project.policies.Missing"}}
    )
    def test_missing_class(self):
        with self.assertRaises(ImproperlyConfigured) as ctx:
            get_policy("broken")
        self.assertIn("not found in module", str(ctx.exception))

    @override_settings(
        DJ_PROBATION_SIM_SETTINGS={"POLICY_EXTENSIONS": {"broken": "nonexistent_module_xyz.Policy"}}
    )
    def test_bad_module(self):
        with self.assertRaises(ImproperlyConfigured) as ctx:
            get_policy("broken")
        self.assertIn("Failed to import policy class", str(ctx.exception))

    @override_settings(DJ_PROBATION_SIM_SETTINGS={"POLICY_MAP": {"null": "NullPolicy"}})
    def test_policy_map_replaces_defaults(self):
        self.assertEqual(set(get_policy_map()), {"null"})
        with self.assertRaises(ImproperlyConfigured):
            get_policy("high-risk")

    def test_invalid_bucket_width(self):
        with self.assertRaises(ImproperlyConfigured):
            get_policy("age-first-low-risk", bucket_years=0)
