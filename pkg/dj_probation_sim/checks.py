"""
Invariant checks run on small instances by ``probation_validate``, and
regime checks evaluated on the outputs of finished runs.
"""

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .engine import Simulation, SimulationConfig
from .exceptions import ScenarioError
from .hazard import (
    BaselineHazard,
    cumulative_hazard,
    derive_group_beta,
    inverse_cumulative_hazard,
    offense_probability,
    calibrate_baseline_from_anchor,
)
from .metrics import paired_delta, regime_crossing, replication_metrics
from .policy import PolicyKind
from .scenario import (
    AGGREGATE_NAME,
    EPISODES_NAME,
    MANIFEST_NAME,
    GridPoint,
    Scenario,
    baseline_for,
    build_config,
    grid_points,
    load_inputs,
    parse_scenario,
    read_run_csv,
)

logger = logging.getLogger(__name__)

# Small enough to finish in seconds.
TINY_OVERRIDES = {
    "t_max": 3000.0,
    "t_e": 100.0,
    "initial_population": 60,
    "capacity": 10,
    "arrival_mean_days": 5.0,
}


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _check(name: str, func: Callable[[], Optional[str]]) -> CheckResult:
    try:
        detail = func()
    except AssertionError as e:
        return CheckResult(name, False, str(e))
    except Exception as e:
        logger.exception("Check %s raised", name)
        return CheckResult(name, False, f"{type(e).__name__}: {e}")
    return CheckResult(name, True, detail or "")


def check_anchor() -> str:
    base = calibrate_baseline_from_anchor(-1.434, 0.342, 730.0, 0.25)
    ratio = offense_probability(base, 730.0, -1.434 - 0.342) / offense_probability(
        base, 730.0, -1.434
    )
    assert abs(ratio - 0.75) < 1e-9, f"treated/untreated ratio {ratio:.12f}"
    return f"Λ₀(730) = {cumulative_hazard(base, 730.0):.4f}"


def check_group_betas() -> str:
    expected = {
        (0.1768, 0.0346): 1.709,
        (0.4644, 0.4418): 0.0684,
        (0.1768, 0.0061): 3.459,
    }
    for (p_untreated, p_treated), beta in expected.items():
        derived = derive_group_beta(p_untreated, p_treated)
        assert abs(derived - beta) < 1e-3, f"{p_untreated}->{p_treated}: β={derived:.4f}"
    return "group effects match their probability pairs"


def check_inverse_round_trip(samples: int = 200, seed: int = 7) -> str:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        segments = int(rng.integers(1, 6))
        breakpoints = np.concatenate(([0.0], np.sort(rng.uniform(0, 2000, segments - 1))))
        base = BaselineHazard(tuple(breakpoints), tuple(rng.uniform(1e-4, 1e-2, segments)))
        s = float(rng.uniform(0, 5000))
        back = inverse_cumulative_hazard(base, cumulative_hazard(base, s))
        worst = max(worst, abs(back - s) / max(s, 1.0))
    assert worst < 1e-10, f"worst relative error {worst:.3e}"
    return f"worst relative error {worst:.1e}"


def _tiny_config(scenario, point, policy, replication=0, **changes) -> SimulationConfig:
    tiny = replace(point, overrides={**point.overrides, **TINY_OVERRIDES, **changes})
    return build_config(scenario, tiny, policy, replication, scenario.seed)


def run_checks(scenario: Scenario, replications: int = 3) -> List[CheckResult]:
    """Run the invariant suite against the scenario's base configuration."""
    point = GridPoint(index=0, parameters={}, overrides={}, reweighting=scenario.reweighting)
    dist, table = load_inputs(scenario, point)
    base = baseline_for(scenario)

    def simulate(config):
        return Simulation(config, dist, table, base).run_full()

    def conservation():
        for replication in range(replications):
            for policy in (PolicyKind.LOW_RISK.value, PolicyKind.HIGH_RISK.value):
                config = _tiny_config(scenario, point, policy, replication)
                result = simulate(config)
                assert result.conservation_holds(), f"{policy} r{replication}: population leak"
                assert result.max_return_count <= config.r_inc, (
                    f"return count {result.max_return_count} exceeds {config.r_inc}"
                )
                assert len(result.snapshots) == config.episodes, "missing snapshots"
        return f"{replications * 2} runs balanced"

    def capacity():
        for replication in range(replications):
            config = _tiny_config(
                scenario,
                point,
                PolicyKind.LOW_RISK.value,
                replication,
                reset_treatment_on_return=True,
            )
            result = simulate(config)
            worst = max((s.enrollment for s in result.snapshots), default=0)
            assert worst <= config.capacity, f"enrollment {worst} > capacity {config.capacity}"
        return "enrollment within capacity"

    def determinism():
        config = _tiny_config(scenario, point, PolicyKind.HIGH_RISK.value)
        assert simulate(config).snapshots == simulate(config).snapshots, "runs differ"
        return "identical trajectories"

    def null_equivalence():
        null = _tiny_config(scenario, point, PolicyKind.NULL.value)
        zero = _tiny_config(scenario, point, PolicyKind.HIGH_RISK.value, capacity=0)
        assert simulate(null).snapshots == simulate(zero).snapshots, "null differs from C=0"
        return "null policy matches zero capacity"

    results = [
        _check("anchor calibration", check_anchor),
        _check("group treatment effects", check_group_betas),
        _check("hazard inverse round trip", check_inverse_round_trip),
        _check("conservation and return cap", conservation),
        _check("capacity with treatment reset", capacity),
        _check("determinism", determinism),
        _check("null equals zero capacity", null_equivalence),
    ]
    _log_results(results)
    return results


def _log_results(results: List[CheckResult]):
    for result in results:
        log = logger.info if result.passed else logger.warning
        log("check %s: %s %s", result.name, "ok" if result.passed else "FAILED", result.detail)


def all_passed(results: List[CheckResult]) -> bool:
    return all(r.passed for r in results)


def summarize(results: List[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    return "\n".join(
        f"{r.name.ljust(width)}  {'ok' if r.passed else 'FAIL'}  {r.detail}" for r in results
    )


OFFENSE_DELTA = "offenses_per_capita_delta"
ACTIVE_POLICIES = (
    PolicyKind.LOW_RISK.value,
    PolicyKind.HIGH_RISK.value,
    PolicyKind.AGE_FIRST_LOW_RISK.value,
)


def _policy_values(rows: pd.DataFrame, policy: str, metric: str) -> np.ndarray:
    group = rows[rows["policy"] == policy].sort_values("replication")
    assert not group.empty, f"no '{policy}' runs"
    return group[metric].to_numpy()


def check_short_term_dominance(
    episodes: pd.DataFrame,
    point: int = 0,
    short: Optional[int] = None,
    long: Optional[int] = None,
) -> str:
    """
    In the short window the high-risk policy has the most negative paired
    offense delta of the active policies, and its paired interval against
    low-risk lies below zero.
    """
    rows = replication_metrics(episodes[episodes["point"] == point], short, long)
    rows = rows[rows["window"] == "short"]
    null = _policy_values(rows, PolicyKind.NULL.value, "offenses_per_capita")
    present = [p for p in ACTIVE_POLICIES if p in set(rows["policy"])]
    for required in (PolicyKind.LOW_RISK.value, PolicyKind.HIGH_RISK.value):
        assert required in present, f"no '{required}' runs"
    deltas = {
        p: paired_delta(_policy_values(rows, p, "offenses_per_capita"), null).mean for p in present
    }
    best = min(deltas, key=deltas.get)
    assert best == PolicyKind.HIGH_RISK.value, (
        f"{best} has the most negative short-term delta ({deltas[best]:.4f})"
    )
    gap = paired_delta(
        _policy_values(rows, PolicyKind.HIGH_RISK.value, "offenses_per_capita"),
        _policy_values(rows, PolicyKind.LOW_RISK.value, "offenses_per_capita"),
    )
    assert gap.mean + gap.half_width < 0, (
        f"high-risk minus low-risk {gap.mean:.4f} ± {gap.half_width:.4f} includes zero"
    )
    return f"high-risk minus low-risk {gap.mean:.4f} ± {gap.half_width:.4f}"


def _long_window(aggregate: pd.DataFrame) -> pd.DataFrame:
    return aggregate[aggregate["window"] == "long"]


def check_two_regimes(aggregate: pd.DataFrame, monitoring: Sequence[float] = (365, 2000)) -> str:
    """
    Over a delta_inc sweep, low-risk wins at small delta_inc and high-risk at
    large delta_inc under long off-probation monitoring, and the switch comes
    earlier under short monitoring.
    """
    for column in ("delta_inc", "off_mean_days"):
        assert column in aggregate.columns, f"aggregate has no '{column}' axis"
    long = _long_window(aggregate)
    sweeps = {}
    for off_mean in monitoring:
        rows = long[long["off_mean_days"] == off_mean]
        assert not rows.empty, f"no runs at off_mean_days={off_mean}"
        table = rows.pivot_table(index="delta_inc", columns="policy", values=OFFENSE_DELTA)
        for policy in (PolicyKind.LOW_RISK.value, PolicyKind.HIGH_RISK.value):
            assert policy in table.columns, f"no '{policy}' runs at off_mean_days={off_mean}"
        sweeps[off_mean] = {
            float(d): (float(row[PolicyKind.LOW_RISK.value]), float(row[PolicyKind.HIGH_RISK.value]))
            for d, row in table.iterrows()
        }

    shorter, longer = min(monitoring), max(monitoring)
    sweep = sweeps[longer]
    smallest, largest = min(sweep), max(sweep)
    assert sweep[smallest][0] < sweep[smallest][1], (
        f"high-risk already preferred at delta_inc={smallest} (off_mean_days={longer})"
    )
    assert sweep[largest][1] <= sweep[largest][0], (
        f"low-risk still preferred at delta_inc={largest} (off_mean_days={longer})"
    )
    early, late = regime_crossing(sweeps[shorter]), regime_crossing(sweep)
    assert early is not None, f"no crossing at off_mean_days={shorter}"
    assert early < late, (
        f"crossing at off_mean_days={shorter} ({early:.4f}) is not before {longer} ({late:.4f})"
    )
    return f"crossings {early:.4f} ({shorter} days) < {late:.4f} ({longer} days)"


def check_spread_shrinks(
    aggregate: pd.DataFrame,
    reference: str = "baseline",
    narrower: Sequence[str] = ("cap++", "arrivals-"),
) -> str:
    """
    The long-window spread between the active policies' offense deltas is
    smaller with more capacity or fewer arrivals than at the reference
    variant, at every delta_inc level.
    """
    assert "variant" in aggregate.columns, "aggregate has no 'variant' axis"
    long = _long_window(aggregate)
    long = long[long["policy"] != PolicyKind.NULL.value]
    if "delta_inc" in long.columns:
        levels = [(d, long[long["delta_inc"] == d]) for d in sorted(long["delta_inc"].unique())]
    else:
        levels = [(None, long)]
    details = []
    for level, rows in levels:
        spread = rows.groupby("variant")[OFFENSE_DELTA].agg(lambda s: s.max() - s.min())
        for variant in (reference, *narrower):
            assert variant in spread.index, f"no '{variant}' runs"
        for variant in narrower:
            assert spread[variant] < spread[reference], (
                f"delta_inc={level}: spread {spread[variant]:.4f} under {variant} "
                f"is not below {spread[reference]:.4f}"
            )
        details.append(f"{reference} {spread[reference]:.4f}")
    return "; ".join(details)


def run_regime_checks(output_dir: Union[str, Path]) -> List[CheckResult]:
    """
    Evaluate the policy-regime checks that apply to a finished run: short-term
    dominance for single-point runs, the two-regime structure for delta_inc by
    off_mean_days sweeps, and spread shrinkage for variant runs.
    """
    output_dir = Path(output_dir)
    manifest_path = output_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise ScenarioError(f"No manifest at '{manifest_path}'")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if not manifest.get("finished"):
        raise ScenarioError(f"The run in '{output_dir}' has not finished")
    scenario = parse_scenario(manifest["scenario"])
    aggregate = read_run_csv(output_dir / AGGREGATE_NAME)

    results = []
    policies = set(scenario.policies)
    if len(grid_points(scenario)) == 1 and {
        PolicyKind.LOW_RISK.value,
        PolicyKind.HIGH_RISK.value,
    } <= policies:
        episodes = read_run_csv(output_dir / EPISODES_NAME)
        results.append(
            _check(
                "short-term dominance",
                lambda: check_short_term_dominance(
                    episodes,
                    short=scenario.windows.get("short"),
                    long=scenario.windows.get("long"),
                ),
            )
        )
    if {"delta_inc", "off_mean_days"} <= set(scenario.axes):
        results.append(_check("two regimes", lambda: check_two_regimes(aggregate)))
    if "variant" in scenario.axes:
        results.append(_check("spread shrinks", lambda: check_spread_shrinks(aggregate)))
    _log_results(results)
    return results
