"""
Proportional-hazards risk model.

Individual risk h_i scales a baseline cumulative hazard Λ₀ so that the survival
function of the time to the next offense is S₀(s) ** exp(h_i). Offense times
are drawn by inverting Λ₀.
"""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import optimize

from .exceptions import CalibrationError, CoefficientError, DomainError

logger = logging.getLogger(__name__)


CATEGORICAL_COVARIATES = (
    "employment",
    "age",
    "prior_felonies",
    "offense_type",
    "sex",
    "ethnicity",
    "drug_abuse",
    "race",
    "supervision",
)

# Rows of the coefficient file that hold scalar coefficients.
SCALAR_ROWS = {
    "arrests": "arrests_coeff",
    "original_risk": "alpha0",
    "mu": "mu_coeff",
}

DAYS_PER_YEAR = 365.25

# Lower edges (years) of age categories 2..6; category 1 is "< 20".
AGE_CATEGORY_EDGES = (20.0, 25.0, 30.0, 40.0, 50.0)

RISK_COMPONENTS = (
    "static",
    "dynamic_age",
    "dynamic_arrests",
    "community_mu",
    "treatment",
)


class RiskGroup(str, Enum):
    LOW = "L"
    HIGH = "H"


def age_category(age_days: float) -> int:
    """Map an age in days to its category (1..6)."""
    return bisect.bisect_right(AGE_CATEGORY_EDGES, age_days / DAYS_PER_YEAR) + 1


@dataclass(frozen=True)
class BetaSpec:
    """
    Treatment effect. Homogeneous specs carry the same β for both risk groups.
    """

    low: float
    high: float

    def __post_init__(self):
        for name, value in (("beta_low", self.low), ("beta_high", self.high)):
            if not math.isfinite(value) or value < 0:
                raise CoefficientError(f"{name} must be finite and >= 0, got {value}")

    @classmethod
    def homogeneous(cls, beta: float) -> "BetaSpec":
        return cls(float(beta), float(beta))

    @classmethod
    def heterogeneous(cls, beta_low: float, beta_high: float) -> "BetaSpec":
        return cls(float(beta_low), float(beta_high))

    @classmethod
    def from_probabilities(
        cls,
        low: Tuple[float, float],
        high: Tuple[float, float],
    ) -> "BetaSpec":
        """
        Build a per-group spec from (untreated, treated) offense probabilities
        over a common horizon, one pair per risk group.
        """
        return cls(derive_group_beta(*low), derive_group_beta(*high))

    @property
    def is_homogeneous(self) -> bool:
        return self.low == self.high

    def effect(self, group: Optional[RiskGroup] = None) -> float:
        if self.is_homogeneous:
            return self.low
        if group is None:
            raise DomainError("A heterogeneous treatment effect needs a risk group.")
        return self.low if RiskGroup(group) is RiskGroup.LOW else self.high

    def describe(self) -> str:
        if self.is_homogeneous:
            return f"{self.low:g}"
        return f"L={self.low:.4g}/H={self.high:.4g}"


@dataclass(frozen=True)
class CoefficientTable:
    arrests_coeff: float
    alpha0: float
    mu_coeff: float
    categorical: Mapping[str, Mapping[int, float]]
    beta_spec: BetaSpec = BetaSpec.homogeneous(0.342)

    def __post_init__(self):
        if not self.alpha0 > 0 or not math.isfinite(self.alpha0):
            raise CoefficientError(f"original_risk (alpha0) must be > 0, got {self.alpha0}")
        for name in ("arrests_coeff", "mu_coeff"):
            if not math.isfinite(getattr(self, name)):
                raise CoefficientError(f"{name} must be finite")
        frozen = {}
        for covariate in CATEGORICAL_COVARIATES:
            levels = self.categorical.get(covariate)
            if not levels:
                raise CoefficientError(f"{covariate}: no coefficients defined")
            if levels.get(1) != 0.0:
                raise CoefficientError(
                    f"{covariate}: reference level 1 must have coefficient 0.000"
                )
            frozen[covariate] = MappingProxyType(dict(sorted(levels.items())))
        object.__setattr__(self, "categorical", MappingProxyType(frozen))

    def coefficient(self, covariate: str, level: int) -> float:
        try:
            levels = self.categorical[covariate]
        except KeyError:
            raise CoefficientError(f"Unknown covariate '{covariate}'")
        try:
            return levels[level]
        except KeyError:
            raise CoefficientError(f"{covariate}: unknown level {level}")

    def levels(self, covariate: str) -> Tuple[int, ...]:
        return tuple(self.categorical[covariate])

    def level_range(self, covariate: str) -> Tuple[int, int]:
        levels = self.levels(covariate)
        return levels[0], levels[-1]

    def with_beta(self, beta_spec: BetaSpec) -> "CoefficientTable":
        return replace(self, beta_spec=beta_spec)


@dataclass(frozen=True)
class RiskScore:
    value: float
    components: Mapping[str, float] = field(default_factory=dict)

    def __float__(self):
        return self.value


@dataclass(frozen=True)
class BaselineHazard:
    """
    Piecewise-constant baseline hazard. Segment k covers
    [breakpoints[k], breakpoints[k + 1]) at rate rates[k]; the last segment is
    open ended.
    """

    breakpoints: Tuple[float, ...]
    rates: Tuple[float, ...]
    _cumulative: Tuple[float, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        breakpoints = tuple(float(b) for b in self.breakpoints)
        rates = tuple(float(r) for r in self.rates)
        if not breakpoints or breakpoints[0] != 0.0:
            raise DomainError("Baseline breakpoints must start at 0")
        if len(breakpoints) != len(rates):
            raise DomainError("Baseline needs exactly one rate per segment")
        if any(b1 < b0 for b0, b1 in zip(breakpoints, breakpoints[1:])):
            raise DomainError("Baseline breakpoints must be nondecreasing")
        if any(not (r > 0 and math.isfinite(r)) for r in rates):
            raise DomainError("Baseline rates must be finite and > 0")
        widths = np.diff(breakpoints)
        cumulative = np.concatenate(([0.0], np.cumsum(widths * np.asarray(rates[:-1]))))
        object.__setattr__(self, "breakpoints", breakpoints)
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "_cumulative", tuple(float(c) for c in cumulative))

    @classmethod
    def exponential(cls, rate: float) -> "BaselineHazard":
        return cls((0.0,), (float(rate),))

    @property
    def is_exponential(self) -> bool:
        return len(self.rates) == 1


def cumulative_hazard(base: BaselineHazard, s: float) -> float:
    """Λ₀(s), accumulated exactly over the rate segments."""
    if s < 0:
        raise DomainError(f"cumulative_hazard needs s >= 0, got {s}")
    k = bisect.bisect_right(base.breakpoints, s) - 1
    return base._cumulative[k] + base.rates[k] * (s - base.breakpoints[k])


def inverse_cumulative_hazard(base: BaselineHazard, y: float) -> float:
    """The time s with Λ₀(s) = y."""
    if y < 0:
        raise DomainError(f"inverse_cumulative_hazard needs y >= 0, got {y}")
    k = bisect.bisect_right(base._cumulative, y) - 1
    return base.breakpoints[k] + (y - base._cumulative[k]) / base.rates[k]


def survival(base: BaselineHazard, s: float, h: Union[RiskScore, float] = 0.0) -> float:
    """S_i(s) = S₀(s) ** exp(h)."""
    return math.exp(-cumulative_hazard(base, s) * math.exp(float(h)))


def offense_probability(
    base: BaselineHazard, horizon: float, h: Union[RiskScore, float] = 0.0
) -> float:
    """Probability of at least one offense within the horizon."""
    return -math.expm1(-cumulative_hazard(base, horizon) * math.exp(float(h)))


def open_uniform(rng: np.random.Generator) -> float:
    """A uniform draw from the open interval (0, 1)."""
    u = rng.random()
    while u == 0.0:
        u = rng.random()
    return u


def compute_risk(
    covariates,
    age_days: float,
    offense_count: int,
    mu: float,
    treated: bool,
    table: CoefficientTable,
    risk_group: Optional[RiskGroup] = None,
) -> RiskScore:
    """
    h_i = α₀·h_i⁰ + θ₁·j_i − β·τ_i, where h_i⁰ sums the categorical
    coefficients of the profile and the μ term.

    ``covariates`` is any object exposing the non-age covariate levels as
    attributes (normally a CovariateProfile). Age is categorised from
    ``age_days`` on every call.
    """
    if mu < 0:
        raise DomainError(f"mu must be >= 0, got {mu}")
    if offense_count < 0:
        raise DomainError(f"offense_count must be >= 0, got {offense_count}")

    static = 0.0
    for covariate in CATEGORICAL_COVARIATES:
        if covariate == "age":
            continue
        static += table.coefficient(covariate, getattr(covariates, covariate))
    age_term = table.coefficient("age", age_category(age_days))

    components = {
        "static": table.alpha0 * static,
        "dynamic_age": table.alpha0 * age_term,
        "dynamic_arrests": table.arrests_coeff * offense_count,
        # μ sits inside h_i⁰, so its effective coefficient is α₀ · mu_coeff.
        "community_mu": table.alpha0 * table.mu_coeff * mu,
        "treatment": -table.beta_spec.effect(risk_group) if treated else 0.0,
    }
    return RiskScore(
        value=math.fsum(components.values()),
        components=MappingProxyType(components),
    )


def sample_offense_time(
    h: Union[RiskScore, float], base: BaselineHazard, rng: np.random.Generator
) -> float:
    """Inverse-transform draw: T = Λ₀⁻¹(−ln(U)·exp(−h))."""
    u = open_uniform(rng)
    return inverse_cumulative_hazard(base, -math.log(u) * math.exp(-float(h)))


def calibrate_baseline_from_anchor(
    h_med: float,
    beta: float,
    horizon_days: float,
    reduction: float,
    tolerance: float = 1e-12,
) -> BaselineHazard:
    """
    Find the exponential baseline under which treatment lowers the offense
    probability of a median-risk individual over ``horizon_days`` by the
    fraction ``reduction``.
    """
    if not 0 < reduction < 1:
        raise DomainError(f"reduction must lie in (0, 1), got {reduction}")
    if not horizon_days > 0:
        raise DomainError(f"horizon_days must be > 0, got {horizon_days}")
    if beta < 0:
        raise DomainError(f"beta must be >= 0, got {beta}")

    untreated_scale = math.exp(h_med)
    treated_scale = math.exp(h_med - beta)

    # Solved in terms of L = Λ₀(horizon).
    def residual(L):
        treated = -math.expm1(-L * treated_scale)
        untreated = -math.expm1(-L * untreated_scale)
        return treated - (1.0 - reduction) * untreated

    lower, upper = 1e-9, 1e3 / untreated_scale
    f_lower, f_upper = residual(lower), residual(upper)
    if f_lower * f_upper > 0:
        raise CalibrationError(
            "No baseline satisfies the anchor: residual "
            f"{f_lower:.3e} at Λ₀={lower:.3e} and {f_upper:.3e} at Λ₀={upper:.3e}"
        )
    root = optimize.brentq(residual, lower, upper, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    if abs(residual(root)) >= tolerance:
        raise CalibrationError(
            f"Root finder stopped at Λ₀={root:.12g} with residual {residual(root):.3e}"
        )
    rate = root / horizon_days
    logger.info(
        "Calibrated baseline rate %.6e/day (Λ₀(%g)=%.6f) for h_med=%g, beta=%g",
        rate,
        horizon_days,
        root,
        h_med,
        beta,
    )
    return BaselineHazard.exponential(rate)


def derive_group_beta(p_untreated: float, p_treated: float) -> float:
    """
    Proportional-hazards effect that turns offense probability p_untreated
    into p_treated over the same horizon.
    """
    if not 0 < p_treated <= p_untreated < 1:
        raise DomainError(
            "derive_group_beta needs 0 < p_treated <= p_untreated < 1, "
            f"got p_untreated={p_untreated}, p_treated={p_treated}"
        )
    return -math.log(math.log1p(-p_treated) / math.log1p(-p_untreated))


def load_coefficients(path: Union[str, Path]) -> CoefficientTable:
    """
    Read a coefficient table from CSV with columns covariate, level, label,
    coefficient. Scalar coefficients use the rows ``arrests``,
    ``original_risk`` and ``mu`` (blank level); an optional ``beta`` row sets
    the homogeneous treatment effect.
    """
    try:
        frame = pd.read_csv(path, dtype={"covariate": str})
    except (OSError, pd.errors.ParserError) as e:
        raise CoefficientError(f"Failed to read coefficient table '{path}': {e}")

    missing = {"covariate", "level", "coefficient"} - set(frame.columns)
    if missing:
        raise CoefficientError(
            f"Coefficient table '{path}' is missing columns: {', '.join(sorted(missing))}"
        )

    scalars = {}
    categorical = {}
    beta = None
    for row in frame.itertuples(index=False):
        name = str(row.covariate).strip()
        value = float(row.coefficient)
        if name in SCALAR_ROWS:
            scalars[SCALAR_ROWS[name]] = value
        elif name == "beta":
            beta = value
        elif name in CATEGORICAL_COVARIATES:
            if pd.isna(row.level):
                raise CoefficientError(f"{name}: categorical row without a level")
            categorical.setdefault(name, {})[int(row.level)] = value
        else:
            raise CoefficientError(f"Unknown covariate '{name}' in '{path}'")

    missing_scalars = set(SCALAR_ROWS.values()) - set(scalars)
    if missing_scalars:
        raise CoefficientError(
            f"Coefficient table '{path}' is missing scalar rows: "
            + ", ".join(k for k, v in SCALAR_ROWS.items() if v in missing_scalars)
        )
    table = CoefficientTable(categorical=categorical, **scalars)
    if beta is not None:
        table = table.with_beta(BetaSpec.homogeneous(beta))
    return table


def default_coefficients() -> CoefficientTable:
    """The bundled coefficient table, or COEFFICIENTS_PATH when configured."""
    from .conf import get_config

    return load_coefficients(get_config("COEFFICIENTS_PATH"))


def weighted_median(values: Sequence[float], weights: Optional[Sequence[float]] = None) -> float:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise DomainError("weighted_median of an empty sequence")
    if weights is None:
        return float(np.median(values))
    weights = np.asarray(weights, dtype=float)
    order = np.argsort(values, kind="stable")
    cumulative = np.cumsum(weights[order])
    index = int(np.searchsorted(cumulative, 0.5 * cumulative[-1]))
    return float(values[order][index])
