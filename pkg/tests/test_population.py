"""
Tests for dj_probation_sim.population: cohort files, sampling, individual
initialisation and risk groups.
"""

import numpy as np
import pandas as pd
import pytest
from django.core.exceptions import ImproperlyConfigured

from dj_probation_sim.conf import DATA_DIR
from dj_probation_sim.events import EventKind
from dj_probation_sim.exceptions import DomainError, IngestionError, SimulationOrderError
from dj_probation_sim.hazard import DAYS_PER_YEAR, RiskGroup
from dj_probation_sim.population import (
    CovariateDistribution,
    EmpiricalTerm,
    ExponentialTerm,
    Individual,
    LogNormalTerm,
    classify_risk_group,
    init_individual,
    load_profiles,
    reference_scores,
    sample_profile,
    synthetic_cohort,
    update_dynamics,
    write_profiles,
    younger_weights,
)

from .base import SimulationTestCase, TempDirTestCase, make_distribution, make_profile

HEADER = (
    "sex,ethnicity,race,employment,drug_abuse,prior_felonies,offense_type,"
    "supervision,age_category,probation_term_days"
)


class FixedTerm:
    def __init__(self, days):
        self.days = days

    def sample(self, rng, profile=None):
        return self.days


class TestLoadProfiles(TempDirTestCase):
    def write(self, body, header=HEADER):
        path = self.tmp / "cohort.csv"
        path.write_text(f"{header}\n{body}\n")
        return path

    def test_bundled_cohort(self):
        dist = load_profiles(DATA_DIR / "cohort.csv")
        self.assertEqual(len(dist), 1000)
        self.assertAlmostEqual(dist.weights.sum(), 1.0, delta=1e-12)
        self.assertIsNotNone(dist.rearrest_fraction)

    def test_level_outside_table_domain(self):
        path = self.write("1,1,1,1,1,1,1,7,2,900\n1,1,1,1,1,1,1,1,2,900")
        with self.assertRaises(IngestionError) as ctx:
            load_profiles(path)
        self.assertEqual(ctx.exception.row, 2)
        self.assertIn("supervision: level 7 outside [1,6]", str(ctx.exception))

    def test_error_names_row(self):
        path = self.write("1,1,1,1,1,1,1,1,2,900\n1,1,1,1,1,1,1,1,2,-5")
        with self.assertRaises(IngestionError) as ctx:
            load_profiles(path)
        self.assertTrue(str(ctx.exception).startswith("row 3:"))

    def test_missing_column(self):
        path = self.write("1,1,1", header="sex,ethnicity,race")
        with self.assertRaises(IngestionError) as ctx:
            load_profiles(path)
        self.assertIn("employment", str(ctx.exception))

    def test_weights_renormalised_with_warning(self):
        path = self.write(
            "1,1,1,1,1,1,1,1,2,900,0.4995\n1,1,1,1,1,1,1,1,3,900,0.5",
            header=HEADER + ",weight",
        )
        with self.assertLogs("dj_probation_sim.population", level="WARNING") as logs:
            dist = load_profiles(path)
        self.assertAlmostEqual(dist.weights.sum(), 1.0, delta=1e-12)
        self.assertIn("renormalising", logs.output[0])

    def test_weights_far_from_one_rejected(self):
        path = self.write(
            "1,1,1,1,1,1,1,1,2,900,0.4\n1,1,1,1,1,1,1,1,3,900,0.5",
            header=HEADER + ",weight",
        )
        with self.assertRaises(IngestionError):
            load_profiles(path)

    def test_optional_columns(self):
        path = self.write(
            "1,1,1,1,1,1,1,1,2,900,3,1\n1,1,1,1,1,1,1,1,3,900,0,0",
            header=HEADER + ",prior_arrests,rearrested",
        )
        dist = load_profiles(path)
        self.assertEqual([p.prior_arrests for p in dist.support], [3, 0])
        self.assertEqual(dist.rearrest_fraction, 0.5)

    def test_write_then_load(self):
        dist = synthetic_cohort(25, rng=np.random.default_rng(1))
        path = write_profiles(dist, self.tmp / "synthetic.csv")
        loaded = load_profiles(path)
        self.assertEqual(
            [(p.race, p.supervision, p.age_category, p.prior_arrests) for p in loaded.support],
            [(p.race, p.supervision, p.age_category, p.prior_arrests) for p in dist.support],
        )
        np.testing.assert_allclose(
            [p.probation_term_days for p in loaded.support],
            [p.probation_term_days for p in dist.support],
        )
        np.testing.assert_allclose(loaded.weights, dist.weights)


class TestCovariateDistribution(SimulationTestCase):
    def test_single_profile_always_drawn(self):
        profile = make_profile(race=3)
        dist = CovariateDistribution([profile])
        rng = self.rng(4)
        for _ in range(50):
            self.assertEqual(sample_profile(dist, rng).race, 3)

    @pytest.mark.slow
    def test_uniform_frequencies(self):
        rng = self.rng(9)
        n = 100_000
        counts = np.bincount([self.dist.draw_index(rng) for _ in range(n)], minlength=len(self.dist))
        p = 1.0 / len(self.dist)
        sigma = np.sqrt(n * p * (1 - p))
        self.assertTrue(np.all(np.abs(counts - n * p) < 3 * sigma))

    def test_younger_weights(self):
        dist = CovariateDistribution(
            [make_profile(initial_age_years=20.0), make_profile(initial_age_years=60.0)]
        )
        np.testing.assert_allclose(younger_weights(dist), [2 / 3, 1 / 3])
        np.testing.assert_allclose(dist.reweighted("younger").weights, [2 / 3, 1 / 3])

    def test_reweighting_kinds(self):
        dist = make_distribution(weights=[0.7, 0.1, 0.1, 0.1])
        self.assertIs(dist.reweighted(None), dist)
        self.assertIs(dist.reweighted("empirical"), dist)
        np.testing.assert_allclose(dist.reweighted("uniform").weights, [0.25] * 4)
        with self.assertRaises(ImproperlyConfigured):
            dist.reweighted("older")

    def test_invalid_weights(self):
        profiles = [make_profile(), make_profile(race=2)]
        for weights in ([0.5], [0.7, 0.7], [-0.5, 1.5]):
            with self.subTest(weights=weights):
                with self.assertRaises(ImproperlyConfigured):
                    CovariateDistribution(profiles, weights)

    def test_sampled_age_within_category(self):
        rng = self.rng(2)
        for _ in range(100):
            profile = sample_profile(self.dist, rng)
            low, high = self.dist.age_bounds[profile.age_category]
            self.assertTrue(low <= profile.initial_age_years < high)

    def test_mean_probation_term(self):
        self.assertAlmostEqual(self.dist.mean_probation_term, (800 + 1200 + 1500 + 900) / 4)


class TestTerms(SimulationTestCase):
    def test_zero_exponential_mean(self):
        self.assertEqual(ExponentialTerm(0).sample(self.rng()), 0.0)

    def test_negative_mean_rejected(self):
        with self.assertRaises(ImproperlyConfigured):
            ExponentialTerm(-1)

    def test_lognormal_clipped(self):
        term = LogNormalTerm(1375.0, 2.5)
        rng = self.rng(6)
        draws = [term.sample(rng) for _ in range(2000)]
        self.assertGreaterEqual(min(draws), 30.0)
        self.assertLessEqual(max(draws), 4320.0)

    def test_empirical_term(self):
        self.assertEqual(EmpiricalTerm().sample(self.rng(), make_profile(probation_term_days=777.0)), 777.0)


class TestInitIndividual(SimulationTestCase):
    def init(self, individual, t, is_return=False, prob=1375.0, off=1000.0):
        return init_individual(
            individual, t, is_return, self.dist, FixedTerm(prob), FixedTerm(off), self.rng(1), self.rng(2)
        )

    def test_fresh_arrival(self):
        individual = self.init(Individual(id=0), 0.0)
        self.assertEqual(individual.end_probation_time, 1375.0)
        self.assertEqual(individual.exit_time, 2375.0)
        self.assertFalse(individual.treated)
        self.assertTrue(individual.not_decided)
        self.assertFalse(individual.off_probation)
        self.assertEqual(individual.age_days, individual.initial_age_days)
        self.assertEqual(individual.generation, 1)

    def test_return_preserves_profile_and_flags(self):
        individual = self.init(Individual(id=3), 10.0)
        individual.treated = True
        individual.not_decided = False
        individual.offense_count = 2
        profile = individual.profile
        age_before = individual.initial_age_days + 490.0

        self.init(individual, 500.0, is_return=True)
        self.assertIs(individual.profile, profile)
        self.assertTrue(individual.treated)
        self.assertFalse(individual.not_decided)
        self.assertEqual(individual.offense_count, 2)
        self.assertAlmostEqual(individual.initial_age_days, age_before)
        self.assertEqual(individual.arrival_time, 500.0)
        self.assertEqual(individual.generation, 2)

    def test_zero_off_probation_term(self):
        individual = self.init(Individual(id=1), 5.0, off=0.0)
        self.assertEqual(individual.exit_time, individual.end_probation_time)

    def test_negative_time_rejected(self):
        with self.assertRaises(DomainError):
            self.init(Individual(id=1), -1.0)


class TestUpdateDynamics(SimulationTestCase):
    def setUp(self):
        self.individual = Individual(id=0, arrival_time=100.0, initial_age_days=7000.0, age_days=7000.0)

    def test_offense_increments_count(self):
        update_dynamics(self.individual, 150.0, EventKind.OFFENSE)
        self.assertEqual(self.individual.offense_count, 1)
        self.assertEqual(self.individual.age_days, 7050.0)

    def test_other_events_keep_count(self):
        for kind in (EventKind.END_PROBATION, EventKind.EXIT, EventKind.RETURN):
            with self.subTest(kind=kind):
                update_dynamics(self.individual, 200.0, kind)
                self.assertEqual(self.individual.offense_count, 0)

    def test_arrival_time_keeps_initial_age(self):
        update_dynamics(self.individual, 100.0, EventKind.ARRIVAL)
        self.assertEqual(self.individual.age_days, 7000.0)

    def test_time_before_arrival(self):
        with self.assertRaises(SimulationOrderError):
            update_dynamics(self.individual, 50.0, EventKind.OFFENSE)


class TestClassifyRiskGroup(SimulationTestCase):
    def test_examples(self):
        scores = [1.0, 2.0, 3.0, 4.0]
        self.assertEqual(classify_risk_group(scores, 4.0), RiskGroup.HIGH)
        self.assertEqual(classify_risk_group(scores, 1.0), RiskGroup.LOW)
        self.assertEqual(classify_risk_group(scores, 2.5), RiskGroup.HIGH)

    def test_matches_top_half_split(self):
        dist = synthetic_cohort(100, rng=self.rng(12))
        scores = reference_scores(dist, self.table)
        ranked = np.sort(scores)
        for score in scores:
            expected = RiskGroup.HIGH if score >= np.median(ranked) else RiskGroup.LOW
            self.assertEqual(classify_risk_group(scores, score), expected)
        high = sum(classify_risk_group(scores, s) is RiskGroup.HIGH for s in scores)
        self.assertGreaterEqual(high, 50)

    def test_empty_scores(self):
        with self.assertRaises(DomainError):
            classify_risk_group([], 0.0)


class TestSyntheticCohort(SimulationTestCase):
    def test_levels_within_table(self):
        dist = synthetic_cohort(200, rng=self.rng(3))
        for profile in dist.support:
            self.assertTrue(1 <= profile.supervision <= 6)
            self.assertIn(profile.rearrested, (0, 1))
            self.assertTrue(30.0 <= profile.probation_term_days <= 4320.0)

    def test_reproducible(self):
        a = synthetic_cohort(30, rng=self.rng(8))
        b = synthetic_cohort(30, rng=self.rng(8))
        self.assertEqual(a.support, b.support)

    def test_unknown_marginal(self):
        with self.assertRaises(ImproperlyConfigured):
            synthetic_cohort(10, marginals={"height": (0.5, 0.5)})

    def test_reference_scores_shape(self):
        scores = reference_scores(self.dist, self.table, mu=0.0)
        self.assertEqual(scores.shape, (len(self.dist),))
        frame = pd.Series(scores)
        self.assertFalse(frame.isna().any())
