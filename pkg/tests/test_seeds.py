"""
Tests for dj_probation_sim.seeds.
"""

import pytest
from django.test import SimpleTestCase

from dj_probation_sim.seeds import STREAM_NAMES, derive_seeds, stream_rngs


class TestDeriveSeeds(SimpleTestCase):
    def test_deterministic(self):
        self.assertEqual(derive_seeds(7, 3, "offense-times", "high-risk"), derive_seeds(7, 3, "offense-times", "high-risk"))

    def test_stream_names_differ(self):
        seeds = {derive_seeds(7, 3, name) for name in STREAM_NAMES}
        self.assertEqual(len(seeds), len(STREAM_NAMES))

    def test_shared_streams_ignore_policy(self):
        for name in ("arrivals", "covariates", "arrival-terms"):
            with self.subTest(stream=name):
                self.assertEqual(derive_seeds(7, 3, name, "null"), derive_seeds(7, 3, name, "high-risk"))

    def test_policy_streams_are_salted(self):
        for name in ("offense-times", "incarceration", "return-terms"):
            with self.subTest(stream=name):
                self.assertNotEqual(derive_seeds(7, 3, name, "null"), derive_seeds(7, 3, name, "high-risk"))

    def test_replications_differ(self):
        self.assertNotEqual(derive_seeds(7, 0, "arrivals"), derive_seeds(7, 1, "arrivals"))

    def test_stream_rngs(self):
        first = stream_rngs(1, 2, "low-risk")
        second = stream_rngs(1, 2, "low-risk")
        self.assertEqual(set(first), set(STREAM_NAMES))
        self.assertEqual(first["return-terms"].random(), second["return-terms"].random())

    @pytest.mark.slow
    def test_no_collisions(self):
        seen = set()
        count = 0
        for replication in range(200_000):
            for name in STREAM_NAMES:
                seen.add(derive_seeds(20240611, replication, name, "high-risk"))
                count += 1
        self.assertEqual(len(seen), count)
