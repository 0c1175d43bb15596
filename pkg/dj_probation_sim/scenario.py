"""
Scenario files and the replication harness.

A scenario names a base configuration, optional sweep axes and named
variants, a replication count and a base seed. ``run_scenario`` expands the
policy × grid point × replication units, runs them (optionally on a process
pool), and writes ``episodes.csv``, ``aggregate.csv`` and ``manifest.json``
to the output directory.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import logging
import os
import platform
import tempfile
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import pandas as pd
import yaml
from django.core.exceptions import ImproperlyConfigured

from . import __version__
from .conf import DATA_DIR, get_config, get_output_dir
from .engine import Simulation, SimulationConfig, resolve_initial_mu
from .exceptions import ScenarioError
from .hazard import (
    BaselineHazard,
    BetaSpec,
    CoefficientTable,
    calibrate_baseline_from_anchor,
    load_coefficients,
    weighted_median,
)
from .metrics import aggregate_report, reports_frame, snapshots_frame
from .policy import PolicyKind, get_policy_map
from .population import CovariateDistribution, load_profiles, reference_scores

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
EPISODES_NAME = "episodes.csv"
AGGREGATE_NAME = "aggregate.csv"
STAGING_DIR = "staging"

SCENARIO_KEYS = (
    "name",
    "description",
    "replications",
    "seed",
    "policies",
    "cohort",
    "coefficients",
    "reweighting",
    "config",
    "baseline",
    "axes",
    "variants",
    "windows",
)

# Fields set per unit by the harness rather than by the scenario.
HARNESS_FIELDS = ("policy", "seed", "replication", "stream_salt")
CONFIG_KEYS = tuple(f.name for f in fields(SimulationConfig) if f.name not in HARNESS_FIELDS)

AXES = (
    "variant",
    "delta_inc",
    "off_mean_days",
    "beta_spec",
    "arrival_mean_days",
    "capacity",
    "reweighting",
    "policy",
)
STRING_AXES = ("variant", "reweighting", "policy")

BUNDLED_SCENARIOS = ("baseline", "feedback-grid", "treatment-effects", "arrival-variants")


@dataclass(frozen=True)
class Anchor:
    """Calibration target: treatment cuts a median-risk offense probability by ``reduction``."""

    h_median: Union[str, float] = "auto"
    beta: float = 0.342
    horizon_days: float = 730.0
    reduction: float = 0.25


@dataclass(frozen=True)
class GridPoint:
    index: int
    parameters: Dict[str, object]
    overrides: Dict[str, object]
    reweighting: Optional[str] = None


@dataclass
class Scenario:
    name: str
    overrides: Dict[str, object] = field(default_factory=dict)
    axes: Dict[str, list] = field(default_factory=dict)
    variants: Dict[str, Dict[str, object]] = field(default_factory=dict)
    replications: int = 20
    seed: int = 0
    policies: Tuple[str, ...] = tuple(k.value for k in PolicyKind)
    cohort: str = ""
    coefficients: str = ""
    reweighting: Optional[str] = None
    anchor: Optional[Anchor] = field(default_factory=Anchor)
    baseline: Optional[BaselineHazard] = None
    windows: Dict[str, int] = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @property
    def scenario_hash(self) -> str:
        payload = json.dumps(self.raw, sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def with_axes(self, extra_axes: Mapping[str, list]) -> "Scenario":
        """A copy with ``extra_axes`` added to, or replacing, the sweep axes."""
        raw = copy.deepcopy(self.raw)
        raw.setdefault("axes", {}).update(extra_axes)
        return parse_scenario(raw)


def parse_beta_spec(value, line=None) -> BetaSpec:
    """
    A number (homogeneous β), ``{low: β_L, high: β_H}``, or per-group
    (untreated, treated) offense probability pairs ``{low: [p, q], high: [p, q]}``.
    """
    try:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return BetaSpec.homogeneous(value)
        if isinstance(value, Mapping) and set(value) == {"low", "high"}:
            low, high = value["low"], value["high"]
            if isinstance(low, (list, tuple)) and isinstance(high, (list, tuple)):
                return BetaSpec.from_probabilities(tuple(low), tuple(high))
            return BetaSpec.heterogeneous(float(low), float(high))
    except (TypeError, ValueError, ImproperlyConfigured) as e:
        raise ScenarioError(f"beta_spec: {e}", line=line)
    raise ScenarioError(
        f"beta_spec: expected a number or a mapping with low and high, got {value!r}", line=line
    )


def _key_lines(text: str) -> Dict[str, int]:
    """Line numbers of top-level keys and of one nested level (``config.t_max``)."""
    lines = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines
    if not isinstance(root, yaml.MappingNode):
        return lines
    for key_node, value_node in root.value:
        lines[key_node.value] = key_node.start_mark.line + 1
        if isinstance(value_node, yaml.MappingNode):
            for sub_key, _ in value_node.value:
                lines[f"{key_node.value}.{sub_key.value}"] = sub_key.start_mark.line + 1
    return lines


def load_scenario(path: Union[str, Path]) -> Scenario:
    """
    Load a scenario file. A bare name such as ``baseline`` resolves to the
    bundled scenario of that name.
    """
    path = Path(path)
    if not path.exists() and str(path) in BUNDLED_SCENARIOS:
        path = DATA_DIR / f"{path}.yaml"
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ScenarioError(f"Cannot read scenario '{path}': {e}")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ScenarioError(
            f"{path}: {getattr(e, 'problem', None) or e}",
            line=mark.line + 1 if mark is not None else None,
        )
    return parse_scenario(data, base_dir=path.parent, key_lines=_key_lines(text))


def _resolve_path(value, base_dir, default) -> str:
    if not value:
        return str(default)
    path = Path(value)
    if not path.is_absolute() and base_dir is not None and (Path(base_dir) / path).exists():
        path = Path(base_dir) / path
    return str(path.resolve())


def _parse_overrides(mapping, where, lines) -> Dict[str, object]:
    if not isinstance(mapping, Mapping):
        raise ScenarioError(f"'{where}' must be a mapping", line=lines.get(where))
    overrides = {}
    for key, value in mapping.items():
        line = lines.get(f"{where}.{key}", lines.get(where))
        if key == "reweighting" and where != "config":
            overrides[key] = value
            continue
        if key not in CONFIG_KEYS:
            raise ScenarioError(f"Unknown {where} key '{key}'", line=line)
        overrides[key] = parse_beta_spec(value, line) if key == "beta_spec" else value
    return overrides


def _parse_baseline(data, lines) -> Tuple[Optional[Anchor], Optional[BaselineHazard]]:
    line = lines.get("baseline")
    if data is None:
        return Anchor(), None
    if not isinstance(data, Mapping):
        raise ScenarioError("'baseline' must be a mapping", line=line)
    try:
        if "anchor" in data:
            anchor = data["anchor"] or {}
            unknown = set(anchor) - {f.name for f in fields(Anchor)}
            if unknown:
                raise ScenarioError(f"Unknown anchor keys: {', '.join(sorted(unknown))}", line=line)
            return Anchor(**anchor), None
        if "rate" in data:
            return None, BaselineHazard.exponential(float(data["rate"]))
        if "rates" in data:
            breakpoints = data.get("breakpoints", [0.0])
            return None, BaselineHazard(tuple(breakpoints), tuple(data["rates"]))
    except (TypeError, ValueError) as e:
        raise ScenarioError(f"baseline: {e}", line=line)
    raise ScenarioError("'baseline' needs an anchor, a rate, or rates with breakpoints", line=line)


def parse_scenario(
    data,
    base_dir: Optional[Union[str, Path]] = None,
    key_lines: Optional[Mapping[str, int]] = None,
) -> Scenario:
    lines = dict(key_lines or {})
    if not isinstance(data, Mapping):
        raise ScenarioError("A scenario must be a mapping")
    unknown = [k for k in data if k not in SCENARIO_KEYS]
    if unknown:
        raise ScenarioError(f"Unknown scenario key '{unknown[0]}'", line=lines.get(unknown[0]))

    raw = copy.deepcopy(dict(data))
    raw["cohort"] = _resolve_path(data.get("cohort"), base_dir, get_config("COHORT_PATH"))
    raw["coefficients"] = _resolve_path(
        data.get("coefficients"), base_dir, get_config("COEFFICIENTS_PATH")
    )

    overrides = _parse_overrides(data.get("config") or {}, "config", lines)

    registered = get_policy_map()
    # An unquoted null in YAML reads as None.
    policies = [
        PolicyKind.NULL.value if p is None else str(p)
        for p in (data.get("policies") or [k.value for k in PolicyKind])
    ]

    variants = {}
    for name, variant in (data.get("variants") or {}).items():
        variants[str(name)] = _parse_overrides(variant or {}, "variants", lines)

    axes = {}
    for name, values in (data.get("axes") or {}).items():
        line = lines.get(f"axes.{name}", lines.get("axes"))
        if name not in AXES:
            raise ScenarioError(f"Unknown sweep axis '{name}'", line=line)
        if not isinstance(values, list) or not values:
            raise ScenarioError(f"Axis '{name}' needs a nonempty list of values", line=line)
        if name == "beta_spec":
            values = [parse_beta_spec(v, line) for v in values]
        if name == "variant":
            missing = [v for v in values if str(v) not in variants]
            if missing:
                raise ScenarioError(f"Axis 'variant' names undefined variants: {missing}", line=line)
            values = [str(v) for v in values]
        if name == "policy":
            policies = [PolicyKind.NULL.value if v is None else str(v) for v in values]
            continue
        axes[name] = values
    if variants and "variant" not in axes:
        axes = {"variant": list(variants), **axes}

    for policy in policies:
        if str(policy) not in registered:
            raise ScenarioError(f"Unknown policy '{policy}'", line=lines.get("policies"))
    policies = [str(p) for p in policies]
    if PolicyKind.NULL.value not in policies:
        policies.insert(0, PolicyKind.NULL.value)

    anchor, baseline = _parse_baseline(data.get("baseline"), lines)

    windows = dict(data.get("windows") or {})
    if set(windows) - {"short", "long"}:
        raise ScenarioError("'windows' accepts only short and long", line=lines.get("windows"))

    replications = data.get("replications")
    if replications is None:
        replications = get_config("REPLICATIONS")
    try:
        replications = int(replications)
    except (TypeError, ValueError):
        raise ScenarioError(
            f"replications must be an integer, got {replications!r}", line=lines.get("replications")
        )
    if replications < 1:
        raise ScenarioError("replications must be >= 1", line=lines.get("replications"))

    scenario = Scenario(
        name=str(data.get("name") or "scenario"),
        overrides=overrides,
        axes=axes,
        variants=variants,
        replications=replications,
        seed=int(data.get("seed") or 0),
        policies=tuple(policies),
        cohort=raw["cohort"],
        coefficients=raw["coefficients"],
        reweighting=data.get("reweighting"),
        anchor=anchor,
        baseline=baseline,
        windows=windows,
        raw=raw,
    )
    # Every grid point must produce a valid configuration.
    for point in grid_points(scenario):
        try:
            build_config(scenario, point, PolicyKind.NULL.value, 0, scenario.seed)
        except ImproperlyConfigured as e:
            raise ScenarioError(f"grid point {point.parameters}: {e}", line=lines.get("config"))
    return scenario


def _display(value):
    return value.describe() if isinstance(value, BetaSpec) else value


def grid_points(scenario: Scenario) -> List[GridPoint]:
    """The cross product of the sweep axes, in a fixed axis order."""
    names = [a for a in AXES if a in scenario.axes]
    points = []
    for index, values in enumerate(itertools.product(*(scenario.axes[n] for n in names))):
        overrides = {}
        reweighting = scenario.reweighting
        parameters = {}
        for name, value in zip(names, values):
            parameters[name] = _display(value)
            if name == "variant":
                variant = dict(scenario.variants[value])
                reweighting = variant.pop("reweighting", reweighting)
                overrides.update(variant)
            elif name == "reweighting":
                reweighting = value
            else:
                overrides[name] = value
        points.append(GridPoint(index, parameters, overrides, reweighting))
    return points


def build_config(
    scenario: Scenario, point: GridPoint, policy: str, replication: int, seed: int
) -> SimulationConfig:
    # Salt by the effective policy: with no capacity every policy behaves
    # like null and must draw from the null streams.
    config = SimulationConfig(
        **{**scenario.overrides, **point.overrides},
        policy=policy,
        seed=seed,
        replication=replication,
        stream_salt=policy,
    )
    if config.capacity == 0 and policy != PolicyKind.NULL.value:
        config = replace(config, stream_salt=PolicyKind.NULL.value)
    return config


@lru_cache(maxsize=8)
def _load_inputs(cohort: str, coefficients: str) -> Tuple[CovariateDistribution, CoefficientTable]:
    table = load_coefficients(coefficients)
    return load_profiles(cohort, table), table


def load_inputs(scenario: Scenario, point: Optional[GridPoint] = None):
    dist, table = _load_inputs(scenario.cohort, scenario.coefficients)
    reweighting = point.reweighting if point is not None else scenario.reweighting
    return dist.reweighted(reweighting), table


def median_risk(dist: CovariateDistribution, table: CoefficientTable, config: SimulationConfig) -> float:
    """Weighted median of the cohort's untreated risk at t=0."""
    mu = resolve_initial_mu(config, dist) * config.mu_scale
    return weighted_median(reference_scores(dist, table, mu), dist.weights)


def baseline_for(scenario: Scenario) -> BaselineHazard:
    """
    The scenario's baseline hazard. Anchored baselines are calibrated once on
    the base cohort and configuration so that every grid point shares them.
    """
    if scenario.baseline is not None:
        return scenario.baseline
    dist, table = load_inputs(scenario)
    anchor = scenario.anchor
    if anchor.h_median == "auto":
        base_point = GridPoint(index=0, parameters={}, overrides={}, reweighting=scenario.reweighting)
        config = build_config(scenario, base_point, PolicyKind.NULL.value, 0, scenario.seed)
        h_med = median_risk(dist, table, config)
    else:
        h_med = float(anchor.h_median)
    return calibrate_baseline_from_anchor(h_med, anchor.beta, anchor.horizon_days, anchor.reduction)


def unit_name(point: int, policy: str, replication: int) -> str:
    return f"p{point:04d}-{policy}-r{replication:04d}"


def _atomic_write(path: Path, write):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def _write_text(path: Path, text: str):
    def write(tmp):
        with open(tmp, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)

    return _atomic_write(path, write)


def run_unit(
    scenario: Scenario,
    point: GridPoint,
    policy: str,
    replication: int,
    seed: int,
    base: BaselineHazard,
    staging_dir: Union[str, Path],
) -> str:
    """Run one replication and publish its episode rows to the staging directory."""
    dist, table = load_inputs(scenario, point)
    config = build_config(scenario, point, policy, replication, seed)
    result = Simulation(config, dist, table, base).run_full()
    if not result.conservation_holds():
        logger.error(
            "Unit %s violates population conservation", unit_name(point.index, policy, replication)
        )
    frame = snapshots_frame(
        result.snapshots, point=point.index, replication=replication, policy=policy
    )
    name = unit_name(point.index, policy, replication)
    _atomic_write(
        Path(staging_dir) / f"{name}.csv",
        lambda tmp: frame.to_csv(tmp, index=False, lineterminator="\n"),
    )
    return name


def package_versions() -> Dict[str, str]:
    versions = {"dj-probation-sim": __version__, "python": platform.python_version()}
    for package in ("numpy", "scipy", "pandas", "django", "PyYAML"):
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "unknown"
    return versions


def _read_manifest(path: Path) -> Optional[dict]:
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise ScenarioError(f"Unreadable manifest '{path}': {e}")


def _write_manifest(path: Path, manifest: dict):
    _write_text(path, json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _concatenate(staging_dir: Path, names: Sequence[str], target: Path):
    chunks = []
    for position, name in enumerate(names):
        text = (staging_dir / f"{name}.csv").read_text(encoding="utf-8")
        if position:
            text = text.split("\n", 1)[1] if "\n" in text else ""
        chunks.append(text)
    _write_text(target, "".join(chunks))


def read_run_csv(path: Union[str, Path]) -> pd.DataFrame:
    """
    Read an episodes or aggregate CSV. Only empty fields count as missing so
    the "null" policy label survives.
    """
    return pd.read_csv(path, keep_default_na=False, na_values=[""], float_precision="round_trip")


def run_scenario(
    scenario: Union[Scenario, str, Path],
    output_dir: Optional[Union[str, Path]] = None,
    workers: Optional[int] = None,
    seed: Optional[int] = None,
    policies: Optional[Sequence[str]] = None,
    extra_axes: Optional[Mapping[str, list]] = None,
) -> int:
    """
    Execute every policy × grid point × replication unit of a scenario and
    write the episode table, the aggregate report and the manifest. Units
    already recorded in an existing manifest for the same scenario are reused.
    Returns the exit status.
    """
    if not isinstance(scenario, Scenario):
        scenario = load_scenario(scenario)
    if extra_axes:
        scenario = scenario.with_axes(extra_axes)
    seed = scenario.seed if seed is None else int(seed)
    workers = int(workers or get_config("WORKERS"))

    selected = list(scenario.policies)
    if policies:
        unknown = set(policies) - set(get_policy_map())
        if unknown:
            raise ScenarioError(f"Unknown policies: {', '.join(sorted(unknown))}")
        selected = [p for p in selected if p in policies] + [
            p for p in policies if p not in selected
        ]
        if PolicyKind.NULL.value not in selected:
            selected.insert(0, PolicyKind.NULL.value)

    output_dir = get_output_dir(output_dir)
    staging_dir = output_dir / STAGING_DIR
    staging_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = output_dir / MANIFEST_NAME

    manifest = {
        "scenario_name": scenario.name,
        "scenario_hash": scenario.scenario_hash,
        "scenario": scenario.raw,
        "seed": seed,
        "policies": selected,
        "replications": scenario.replications,
        "versions": package_versions(),
        "completed": [],
        "finished": False,
    }
    previous = _read_manifest(manifest_path)
    if previous is not None:
        for key in ("scenario_hash", "seed", "policies", "replications"):
            if previous.get(key) != manifest[key]:
                raise ScenarioError(
                    f"'{output_dir}' holds a different run ({key} differs); "
                    "use another output directory"
                )
        manifest["completed"] = sorted(
            name for name in previous.get("completed", [])
            if (staging_dir / f"{name}.csv").exists()
        )
        if manifest["completed"]:
            logger.info("Resuming %s: %d units already done", scenario.name, len(manifest["completed"]))

    points = grid_points(scenario)
    base = baseline_for(scenario)
    units = [
        (point, policy, replication)
        for point in points
        for policy in selected
        for replication in range(scenario.replications)
    ]
    names = [unit_name(p.index, policy, r) for p, policy, r in units]
    done = set(manifest["completed"])
    pending = [u for u, n in zip(units, names) if n not in done]
    _write_manifest(manifest_path, manifest)

    def finished(name):
        done.add(name)
        manifest["completed"] = sorted(done)
        _write_manifest(manifest_path, manifest)
        logger.info("%s: unit %s done (%d/%d)", scenario.name, name, len(done), len(units))

    if workers <= 1:
        for point, policy, replication in pending:
            finished(
                run_unit(scenario, point, policy, replication, seed, base, staging_dir)
            )
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = [
                executor.submit(
                    run_unit,
                    scenario,
                    point,
                    policy,
                    replication,
                    seed,
                    base,
                    staging_dir,
                )
                for point, policy, replication in pending
            ]
            for future in as_completed(futures):
                finished(future.result())

    episodes_path = output_dir / EPISODES_NAME
    _concatenate(staging_dir, names, episodes_path)

    episodes = read_run_csv(episodes_path)
    reports = aggregate_report(
        episodes,
        parameters={p.index: p.parameters for p in points},
        short=scenario.windows.get("short"),
        long=scenario.windows.get("long"),
    )
    aggregate = reports_frame(reports)
    _atomic_write(
        output_dir / AGGREGATE_NAME,
        lambda tmp: aggregate.to_csv(tmp, index=False, lineterminator="\n"),
    )

    manifest["finished"] = True
    manifest["outputs"] = [EPISODES_NAME, AGGREGATE_NAME]
    _write_manifest(manifest_path, manifest)
    logger.info("%s: wrote %s", scenario.name, output_dir)
    return 0


def run_scenario_from_manifest(
    manifest_path: Union[str, Path],
    output_dir: Optional[Union[str, Path]] = None,
    workers: Optional[int] = None,
) -> int:
    """Re-run the scenario recorded in a manifest, by default into its own directory."""
    manifest_path = Path(manifest_path)
    manifest = _read_manifest(manifest_path)
    if manifest is None:
        raise ScenarioError(f"No manifest at '{manifest_path}'")
    scenario = parse_scenario(manifest["scenario"])
    return run_scenario(
        scenario,
        output_dir=output_dir or manifest_path.parent,
        workers=workers,
        seed=manifest["seed"],
        policies=manifest["policies"],
    )


def parse_axis_option(option: str) -> Tuple[str, list]:
    """
    Parse a command-line axis ``name=v1,v2,...``. Values of numeric axes are
    read as YAML scalars; policy, variant and reweighting values stay strings.
    """
    name, sep, values = option.partition("=")
    name = name.strip()
    if not sep or not values.strip():
        raise ScenarioError(f"Axis '{option}' must look like name=v1,v2,...")
    if name not in AXES:
        raise ScenarioError(f"Unknown sweep axis '{name}'")
    items = [v.strip() for v in values.split(",") if v.strip()]
    if name in STRING_AXES:
        return name, items
    try:
        return name, [yaml.safe_load(v) for v in items]
    except yaml.YAMLError as e:
        raise ScenarioError(f"Axis '{name}': {e}")
