"""
Per-episode metrics, reporting windows and policy comparisons.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from .conf import get_config
from .engine import Snapshot
from .exceptions import AlignmentError, DomainError, WindowError

logger = logging.getLogger(__name__)

WINDOWS = ("short", "long")

LABEL_COLUMNS = ("point", "replication", "policy")
SNAPSHOT_COLUMNS = tuple(f.name for f in fields(Snapshot))
CORE_COLUMNS = (
    "episode",
    "population",
    "offenses",
    "incarcerations",
    "completions",
    "enrollment",
    "mu",
    "arrivals",
    "returns",
)
EPISODE_COLUMNS = (
    LABEL_COLUMNS + CORE_COLUMNS + tuple(c for c in SNAPSHOT_COLUMNS if c not in CORE_COLUMNS)
)

NO_EFFECT_MARKER = "~0"


@dataclass(frozen=True)
class EpisodeMetrics:
    offenses_per_capita: float
    incarcerations_per_capita: float
    completions_per_capita: float
    population: float
    enrollment: float
    mu: float
    offenses_low_per_capita: float = 0.0
    offenses_high_per_capita: float = 0.0

    @classmethod
    def from_snapshot(cls, snapshot: Snapshot) -> "EpisodeMetrics":
        population = max(snapshot.population, 1)
        return cls(
            offenses_per_capita=snapshot.offenses / population,
            incarcerations_per_capita=snapshot.incarcerations / population,
            completions_per_capita=snapshot.completions / population,
            population=float(snapshot.population),
            enrollment=float(snapshot.enrollment),
            mu=snapshot.mu,
            offenses_low_per_capita=snapshot.offenses_low / max(snapshot.population_low, 1),
            offenses_high_per_capita=snapshot.offenses_high / max(snapshot.population_high, 1),
        )

    @classmethod
    def mean(cls, items: Sequence["EpisodeMetrics"]) -> "EpisodeMetrics":
        frame = pd.DataFrame([asdict(m) for m in items])
        return cls(**{name: float(value) for name, value in frame.mean().items()})


METRIC_NAMES = tuple(f.name for f in fields(EpisodeMetrics))


@dataclass(frozen=True)
class StationarityResult:
    slope: float
    p_value: float
    episodes: int
    stationary: bool


def stationarity_check(
    snapshots: Sequence[Snapshot],
    episodes: Optional[int] = None,
    alpha: float = 0.05,
) -> Optional[StationarityResult]:
    """
    Regress population on episode index over the trailing episodes. A
    significant trend is logged as a warning; it never stops a report.
    """
    episodes = episodes or get_config("STATIONARITY_EPISODES")
    tail = list(snapshots)[-episodes:]
    if len(tail) < 3:
        return None
    x = np.array([s.episode for s in tail], dtype=float)
    y = np.array([s.population for s in tail], dtype=float)
    fit = stats.linregress(x, y)
    p_value = float(fit.pvalue) if math.isfinite(fit.pvalue) else 1.0
    result = StationarityResult(float(fit.slope), p_value, len(tail), p_value >= alpha)
    if not result.stationary:
        logger.warning(
            "Population still trending over the last %d episodes (slope %.4g/episode, p=%.3g)",
            len(tail),
            result.slope,
            result.p_value,
        )
    return result


def window_episodes(n_snapshots: int, window: str, short=None, long=None) -> Tuple[int, int]:
    """Index range [start, stop) of ``window`` in a trajectory of n snapshots."""
    short = short or get_config("SHORT_WINDOW")
    long = long or get_config("LONG_WINDOW")
    if window == "short":
        size, start = short, 0
    elif window == "long":
        size, start = long, n_snapshots - long
    else:
        raise WindowError(f"Unknown window '{window}' (expected short or long)")
    if n_snapshots < size:
        raise WindowError(
            f"The {window} window needs {size} episodes, trajectory has {n_snapshots}"
        )
    return start, start + size


def window_metrics(
    snapshots: Sequence[Snapshot],
    window: str,
    short: Optional[int] = None,
    long: Optional[int] = None,
    check_stationarity: bool = True,
) -> EpisodeMetrics:
    """
    Average per-episode metrics over the short window (the first episodes) or
    the long window (the final episodes before the horizon).
    """
    snapshots = list(snapshots)
    start, stop = window_episodes(len(snapshots), window, short, long)
    if window == "long" and check_stationarity:
        stationarity_check(snapshots)
    return EpisodeMetrics.mean([EpisodeMetrics.from_snapshot(s) for s in snapshots[start:stop]])


@dataclass(frozen=True)
class DeltaEstimate:
    mean: float
    half_width: float
    n: int
    marker: str = ""

    @property
    def interval(self) -> Tuple[float, float]:
        return self.mean - self.half_width, self.mean + self.half_width


def _z(ci_level: Optional[float]) -> float:
    ci_level = ci_level or get_config("CI_LEVEL")
    return float(stats.norm.ppf(0.5 + ci_level / 2.0))


def mean_interval(values: Sequence[float], ci_level: Optional[float] = None) -> DeltaEstimate:
    """
    Mean with a normal-approximation confidence half-width. Below
    MIN_REPLICATIONS_FOR_CI the half-width is NaN and no marker is set.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise DomainError("mean_interval of an empty sequence")
    if values.size < get_config("MIN_REPLICATIONS_FOR_CI"):
        return DeltaEstimate(float(values.mean()), math.nan, int(values.size))
    half = _z(ci_level) * values.std(ddof=1) / math.sqrt(values.size)
    mean = float(values.mean())
    marker = NO_EFFECT_MARKER if mean - half <= 0 <= mean + half else ""
    return DeltaEstimate(mean, float(half), int(values.size), marker)


def paired_delta(
    policy_values: Sequence[float],
    null_values: Sequence[float],
    paired: bool = True,
    ci_level: Optional[float] = None,
) -> DeltaEstimate:
    """
    Policy minus null. Paired deltas use per-replication differences (common
    random numbers); unpaired deltas combine the two sample variances.
    """
    a = np.asarray(policy_values, dtype=float)
    b = np.asarray(null_values, dtype=float)
    if paired:
        if a.size != b.size:
            raise AlignmentError(
                f"Paired comparison needs equal replication counts, got {a.size} and {b.size}"
            )
        return mean_interval(a - b, ci_level)
    if min(a.size, b.size) == 0:
        raise DomainError("paired_delta needs at least one replication per arm")
    mean = float(a.mean() - b.mean())
    if min(a.size, b.size) < get_config("MIN_REPLICATIONS_FOR_CI"):
        return DeltaEstimate(mean, math.nan, int(min(a.size, b.size)))
    half = _z(ci_level) * math.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
    marker = NO_EFFECT_MARKER if mean - half <= 0 <= mean + half else ""
    return DeltaEstimate(mean, float(half), int(min(a.size, b.size)), marker)


def snapshots_frame(snapshots: Iterable[Snapshot], **labels) -> pd.DataFrame:
    frame = pd.DataFrame([asdict(s) for s in snapshots], columns=list(SNAPSHOT_COLUMNS))
    for name, value in labels.items():
        frame[name] = value
    columns = [c for c in EPISODE_COLUMNS if c in frame.columns]
    return frame[columns + [c for c in frame.columns if c not in columns]]


def snapshots_from_frame(frame: pd.DataFrame) -> List[Snapshot]:
    frame = frame.sort_values("episode")
    snapshots = []
    for row in frame[list(SNAPSHOT_COLUMNS)].itertuples(index=False):
        values = row._asdict()
        snapshots.append(
            Snapshot(
                **{
                    name: float(value) if name == "mu" else int(value)
                    for name, value in values.items()
                }
            )
        )
    return snapshots


def replication_metrics(
    episodes: pd.DataFrame,
    short: Optional[int] = None,
    long: Optional[int] = None,
) -> pd.DataFrame:
    """One row of window-averaged metrics per (point, policy, replication, window)."""
    rows = []
    for (point, policy, replication), group in episodes.groupby(
        ["point", "policy", "replication"], sort=True
    ):
        snapshots = snapshots_from_frame(group)
        for window in WINDOWS:
            metrics = window_metrics(snapshots, window, short, long)
            rows.append(
                {
                    "point": point,
                    "policy": policy,
                    "replication": replication,
                    "window": window,
                    **asdict(metrics),
                }
            )
    return pd.DataFrame(rows)


def relative_to_null(
    policy_reports: pd.DataFrame,
    null_reports: pd.DataFrame,
    paired: bool = True,
    metrics: Sequence[str] = METRIC_NAMES,
    ci_level: Optional[float] = None,
) -> Dict[Tuple, DeltaEstimate]:
    """
    Deltas of ``policy_reports`` against ``null_reports`` (replication-level
    rows from replication_metrics), keyed by (point, window, metric). Negative
    deltas mean fewer offenses than under no treatment.
    """
    policy_cells = set(map(tuple, policy_reports[["point", "window"]].drop_duplicates().values))
    null_cells = set(map(tuple, null_reports[["point", "window"]].drop_duplicates().values))
    if policy_cells != null_cells:
        raise AlignmentError(
            "Policy and null reports cover different grid points: "
            f"{sorted(policy_cells ^ null_cells)}"
        )

    deltas = {}
    for (point, window), policy_group in policy_reports.groupby(["point", "window"], sort=True):
        null_group = null_reports[
            (null_reports["point"] == point) & (null_reports["window"] == window)
        ]
        policy_group = policy_group.sort_values("replication")
        null_group = null_group.sort_values("replication")
        if paired and list(policy_group["replication"]) != list(null_group["replication"]):
            raise AlignmentError(
                f"Point {point} ({window}): replications differ between policy and null"
            )
        for metric in metrics:
            deltas[(point, window, metric)] = paired_delta(
                policy_group[metric].to_numpy(),
                null_group[metric].to_numpy(),
                paired=paired,
                ci_level=ci_level,
            )
    return deltas


@dataclass
class AggregateReport:
    policy: str
    point: int
    window: str
    parameters: Dict[str, object] = field(default_factory=dict)
    means: Dict[str, DeltaEstimate] = field(default_factory=dict)
    deltas: Dict[str, DeltaEstimate] = field(default_factory=dict)

    def as_row(self) -> dict:
        row = {"point": self.point, **self.parameters, "policy": self.policy, "window": self.window}
        for metric, estimate in self.means.items():
            row[f"{metric}_mean"] = estimate.mean
            row[f"{metric}_ci"] = estimate.half_width
        for metric, delta in self.deltas.items():
            row[f"{metric}_delta"] = delta.mean
            row[f"{metric}_delta_ci"] = delta.half_width
            row[f"{metric}_marker"] = delta.marker
        row["replications"] = next(iter(self.means.values())).n if self.means else 0
        return row


def aggregate_report(
    episodes: pd.DataFrame,
    parameters: Optional[Mapping[int, Mapping[str, object]]] = None,
    null_policy: str = "null",
    paired: bool = True,
    short: Optional[int] = None,
    long: Optional[int] = None,
    ci_level: Optional[float] = None,
) -> List[AggregateReport]:
    """
    Summarise an episode table into one report per (point, policy, window),
    with replication means, confidence half-widths and deltas against the
    null policy at the same point.
    """
    per_replication = replication_metrics(episodes, short, long)
    null_reports = per_replication[per_replication["policy"] == null_policy]
    if null_reports.empty:
        raise AlignmentError(f"No '{null_policy}' runs to compare against")

    reports = []
    for policy, policy_reports in per_replication.groupby("policy", sort=True):
        deltas = relative_to_null(policy_reports, null_reports, paired=paired, ci_level=ci_level)
        for (point, window), group in policy_reports.groupby(["point", "window"], sort=True):
            report = AggregateReport(
                policy=policy,
                point=int(point),
                window=window,
                parameters=dict((parameters or {}).get(int(point), {})),
            )
            for metric in METRIC_NAMES:
                report.means[metric] = mean_interval(group[metric].to_numpy(), ci_level)
                report.deltas[metric] = deltas[(point, window, metric)]
            reports.append(report)
    return reports


def reports_frame(reports: Iterable[AggregateReport]) -> pd.DataFrame:
    return pd.DataFrame([r.as_row() for r in reports])


def regime_crossing(sweep: Mapping[float, Tuple[float, float]]) -> Optional[float]:
    """
    Smallest δ at which the high-risk delta is no larger than the low-risk
    delta, interpolated linearly between the bracketing grid points. ``sweep``
    maps δ to (low-risk delta, high-risk delta).
    """
    if len(sweep) < 3:
        raise DomainError(f"regime_crossing needs at least 3 grid points, got {len(sweep)}")
    grid = sorted(sweep)
    gaps = [sweep[d][1] - sweep[d][0] for d in grid]
    for k, gap in enumerate(gaps):
        if gap > 0:
            continue
        if k == 0:
            return float(grid[0])
        previous = gaps[k - 1]
        return float(grid[k - 1] + (grid[k] - grid[k - 1]) * previous / (previous - gap))
    return None
