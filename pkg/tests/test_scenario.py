"""
Tests for dj_probation_sim.scenario: scenario files, grid expansion and the
replication harness.
"""

import json
import os
from unittest.mock import patch

import pytest

from dj_probation_sim.exceptions import ScenarioError
from dj_probation_sim.hazard import BetaSpec, offense_probability
from dj_probation_sim.scenario import (
    AGGREGATE_NAME,
    BUNDLED_SCENARIOS,
    EPISODES_NAME,
    MANIFEST_NAME,
    STAGING_DIR,
    GridPoint,
    baseline_for,
    build_config,
    grid_points,
    load_inputs,
    load_scenario,
    median_risk,
    parse_axis_option,
    read_run_csv,
    run_scenario,
    run_scenario_from_manifest,
)

from .base import TempDirTestCase

TINY_SCENARIO = """\
name: tiny
replications: 2
seed: 5
reweighting: uniform
policies: ["null", high-risk]
config:
  t_max: 600
  t_e: 100
  capacity: 4
  delta_inc: 0.05
  arrival_mean_days: 20
  off_mean_days: 200
  initial_population: 15
  mu_scale: 100
axes:
  delta_inc: [0.0, 0.1]
baseline:
  anchor: {h_median: auto, beta: 0.342, horizon_days: 730, reduction: 0.25}
windows:
  short: 2
  long: 2
"""


class ScenarioTestCase(TempDirTestCase):
    def write(self, text, name="scenario.yaml"):
        path = self.tmp / name
        path.write_text(text)
        return path


class TestLoadScenario(ScenarioTestCase):
    def test_tiny_scenario(self):
        scenario = load_scenario(self.write(TINY_SCENARIO))
        self.assertEqual(scenario.name, "tiny")
        self.assertEqual(scenario.policies, ("null", "high-risk"))
        self.assertEqual(scenario.windows, {"short": 2, "long": 2})
        self.assertEqual(len(grid_points(scenario)), 2)

    def test_null_policy_always_included(self):
        scenario = load_scenario(self.write(TINY_SCENARIO.replace('["null", high-risk]', "[low-risk]")))
        self.assertEqual(scenario.policies, ("null", "low-risk"))

    def test_bundled_scenarios(self):
        sizes = {"baseline": 1, "feedback-grid": 44, "treatment-effects": 20, "arrival-variants": 12}
        for name in BUNDLED_SCENARIOS:
            with self.subTest(name=name):
                scenario = load_scenario(name)
                self.assertEqual(len(grid_points(scenario)), sizes[name])
                self.assertEqual(scenario.policies[0], "null")

    def test_baseline_values(self):
        scenario = load_scenario("baseline")
        config = build_config(scenario, grid_points(scenario)[0], "high-risk", 0, scenario.seed)
        self.assertEqual(config.capacity, 80)
        self.assertEqual(config.delta_inc, 0.048)
        self.assertEqual(config.off_mean_days, 1000)
        self.assertEqual(config.arrival_mean_days, 5)
        self.assertEqual(config.beta_spec, BetaSpec.homogeneous(0.342))
        self.assertEqual(config.stream_salt, "high-risk")

    def test_heterogeneous_beta_axis(self):
        scenario = load_scenario("treatment-effects")
        specs = {p.overrides["beta_spec"] for p in grid_points(scenario)}
        lower_better = [s for s in specs if not s.is_homogeneous]
        self.assertEqual(len(lower_better), 2)
        self.assertTrue(any(abs(s.low - 3.459) < 1e-3 for s in lower_better))

    def test_variants_carry_reweighting(self):
        scenario = load_scenario("arrival-variants")
        younger = [p for p in grid_points(scenario) if p.parameters["variant"] == "younger"]
        self.assertEqual({p.reweighting for p in younger}, {"younger"})
        cap = [p for p in grid_points(scenario) if p.parameters["variant"] == "cap++"]
        self.assertEqual({p.overrides["capacity"] for p in cap}, {200})

    def test_unknown_config_key_reports_line(self):
        text = TINY_SCENARIO.replace("  capacity: 4\n", "  capacity: 4\n  capacty: 5\n")
        with self.assertRaises(ScenarioError) as ctx:
            load_scenario(self.write(text))
        self.assertEqual(ctx.exception.line, 10)
        self.assertIn("capacty", str(ctx.exception))

    def test_yaml_syntax_error_reports_line(self):
        with self.assertRaises(ScenarioError) as ctx:
            load_scenario(self.write("name: broken\npolicies: [null, high-risk\nseed: 1\n"))
        self.assertIsNotNone(ctx.exception.line)
        self.assertTrue(str(ctx.exception).startswith("line "))

    def test_unknown_policy(self):
        with self.assertRaises(ScenarioError):
            load_scenario(self.write(TINY_SCENARIO.replace("high-risk]", "random]")))

    def test_invalid_grid_point(self):
        text = TINY_SCENARIO.replace("delta_inc: [0.0, 0.1]", "delta_inc: [0.0, 1.5]")
        with self.assertRaises(ScenarioError) as ctx:
            load_scenario(self.write(text))
        self.assertIn("delta_inc", str(ctx.exception))

    def test_zero_replications_rejected(self):
        text = TINY_SCENARIO.replace("replications: 2", "replications: 0")
        with self.assertRaises(ScenarioError) as ctx:
            load_scenario(self.write(text))
        self.assertEqual(ctx.exception.line, 2)

    def test_replications_default_from_settings(self):
        text = TINY_SCENARIO.replace("replications: 2\n", "")
        with self.settings(DJ_PROBATION_SIM_SETTINGS={"REPLICATIONS": 7}):
            self.assertEqual(load_scenario(self.write(text)).replications, 7)

    def test_zero_capacity_uses_null_streams(self):
        scenario = load_scenario("baseline")
        point = GridPoint(index=0, parameters={}, overrides={"capacity": 0})
        for policy in ("null", "low-risk", "high-risk"):
            with self.subTest(policy=policy):
                config = build_config(scenario, point, policy, 0, scenario.seed)
                self.assertEqual(config.stream_salt, "null")

    def test_missing_file(self):
        with self.assertRaises(ScenarioError):
            load_scenario(self.tmp / "absent.yaml")

    def test_with_axes(self):
        scenario = load_scenario(self.write(TINY_SCENARIO)).with_axes({"capacity": [0, 4, 8]})
        self.assertEqual(len(grid_points(scenario)), 6)


class TestParseAxisOption(ScenarioTestCase):
    def test_numeric_axis(self):
        self.assertEqual(parse_axis_option("delta_inc=0,0.012,0.024"), ("delta_inc", [0, 0.012, 0.024]))

    def test_string_axis(self):
        self.assertEqual(parse_axis_option("reweighting=uniform, younger"), ("reweighting", ["uniform", "younger"]))

    def test_malformed(self):
        for option in ("delta_inc", "delta_inc=", "speed=1,2"):
            with self.subTest(option=option):
                with self.assertRaises(ScenarioError):
                    parse_axis_option(option)


class TestCalibration(ScenarioTestCase):
    def test_auto_anchor_pins_median_individual(self):
        scenario = load_scenario(self.write(TINY_SCENARIO))
        base = baseline_for(scenario)
        dist, table = load_inputs(scenario)
        base_point = GridPoint(index=0, parameters={}, overrides={}, reweighting="uniform")
        config = build_config(scenario, base_point, "null", 0, scenario.seed)
        h_med = median_risk(dist, table, config)
        ratio = offense_probability(base, 730.0, h_med - 0.342) / offense_probability(base, 730.0, h_med)
        self.assertAlmostEqual(ratio, 0.75, delta=1e-9)

    def test_explicit_rate(self):
        text = TINY_SCENARIO.replace(
            "  anchor: {h_median: auto, beta: 0.342, horizon_days: 730, reduction: 0.25}",
            "  rate: 0.002",
        )
        self.assertEqual(baseline_for(load_scenario(self.write(text))).rates, (0.002,))


class TestRunScenario(ScenarioTestCase):
    def setUp(self):
        super().setUp()
        self.scenario_path = self.write(TINY_SCENARIO)
        self.output = self.tmp / "out"

    def test_writes_outputs(self):
        status = run_scenario(self.scenario_path, output_dir=self.output)
        self.assertEqual(status, 0)
        manifest = json.loads((self.output / MANIFEST_NAME).read_text())
        self.assertTrue(manifest["finished"])
        self.assertEqual(manifest["seed"], 5)
        self.assertEqual(len(manifest["completed"]), 2 * 2 * 2)
        self.assertIn("numpy", manifest["versions"])

        episodes = read_run_csv(self.output / EPISODES_NAME)
        self.assertEqual(len(episodes), 2 * 2 * 2 * 6)
        aggregate = read_run_csv(self.output / AGGREGATE_NAME)
        # Points × policies × windows.
        self.assertEqual(len(aggregate), 2 * 2 * 2)
        self.assertEqual(set(aggregate["delta_inc"]), {0.0, 0.1})

    def test_null_label_read_back(self):
        run_scenario(self.scenario_path, output_dir=self.output)
        episodes = read_run_csv(self.output / EPISODES_NAME)
        self.assertEqual(set(episodes["policy"]), {"null", "high-risk"})
        aggregate = read_run_csv(self.output / AGGREGATE_NAME)
        self.assertIn("null", set(aggregate["policy"]))

    def test_zero_capacity_matches_null(self):
        text = TINY_SCENARIO.replace("  delta_inc: [0.0, 0.1]\n", "  capacity: [0]\n")
        run_scenario(self.write(text), output_dir=self.output)
        episodes = read_run_csv(self.output / EPISODES_NAME)
        by_policy = {
            policy: group.drop(columns="policy").reset_index(drop=True)
            for policy, group in episodes.groupby("policy")
        }
        self.assertTrue(by_policy["null"].equals(by_policy["high-risk"]))

        aggregate = read_run_csv(self.output / AGGREGATE_NAME)
        high_risk = aggregate[aggregate["policy"] == "high-risk"]
        self.assertEqual(len(high_risk), 2)
        for column in [c for c in aggregate.columns if c.endswith("_delta")]:
            with self.subTest(column=column):
                self.assertEqual(set(high_risk[column]), {0.0})

    def test_policies_share_arrivals(self):
        run_scenario(self.scenario_path, output_dir=self.output)
        episodes = read_run_csv(self.output / EPISODES_NAME)
        first = episodes[(episodes["point"] == 0) & (episodes["replication"] == 0)]
        by_policy = {p: g["arrivals"].tolist() for p, g in first.groupby("policy")}
        self.assertEqual(by_policy["null"], by_policy["high-risk"])

    def test_rerun_from_manifest_is_identical(self):
        run_scenario(self.scenario_path, output_dir=self.output)
        other = self.tmp / "again"
        run_scenario_from_manifest(self.output / MANIFEST_NAME, output_dir=other)
        for name in (EPISODES_NAME, AGGREGATE_NAME):
            with self.subTest(name=name):
                self.assertEqual((self.output / name).read_bytes(), (other / name).read_bytes())

    def test_resume_reuses_staged_units(self):
        run_scenario(self.scenario_path, output_dir=self.output)
        before = (self.output / EPISODES_NAME).read_bytes()
        staged = sorted((self.output / STAGING_DIR).glob("*.csv"))
        staged[0].unlink()
        with self.assertLogs("dj_probation_sim.scenario", level="INFO") as logs:
            run_scenario(self.scenario_path, output_dir=self.output)
        self.assertTrue(any("Resuming" in line for line in logs.output))
        self.assertEqual((self.output / EPISODES_NAME).read_bytes(), before)

    def test_different_run_in_same_directory(self):
        run_scenario(self.scenario_path, output_dir=self.output)
        with self.assertRaises(ScenarioError) as ctx:
            run_scenario(self.scenario_path, output_dir=self.output, seed=6)
        self.assertIn("seed", str(ctx.exception))

    def test_policy_filter(self):
        run_scenario(self.scenario_path, output_dir=self.output, policies=["high-risk"])
        manifest = json.loads((self.output / MANIFEST_NAME).read_text())
        self.assertEqual(manifest["policies"], ["null", "high-risk"])

    def test_unknown_policy_filter(self):
        with self.assertRaises(ScenarioError):
            run_scenario(self.scenario_path, output_dir=self.output, policies=["random"])

    def test_output_dir_from_environment(self):
        target = self.tmp / "from-env"
        with self.settings(DJ_PROBATION_SIM_SETTINGS={"OUTPUT_DIR": str(self.tmp / "setting")}):
            with patch.dict(os.environ, {"DJ_PROBATION_SIM_OUTPUT_DIR": str(target)}):
                run_scenario(self.scenario_path)
        self.assertTrue((target / MANIFEST_NAME).exists())

    @pytest.mark.slow
    def test_worker_pool_matches_serial(self):
        run_scenario(self.scenario_path, output_dir=self.output, workers=1)
        pooled = self.tmp / "pooled"
        run_scenario(self.scenario_path, output_dir=pooled, workers=2)
        self.assertEqual(
            (self.output / EPISODES_NAME).read_bytes(), (pooled / EPISODES_NAME).read_bytes()
        )
