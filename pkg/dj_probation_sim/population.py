"""
Individuals, their covariates, and the cohort distributions they are drawn from.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from django.core.exceptions import ImproperlyConfigured

from .conf import get_config
from .events import EventKind
from .exceptions import DomainError, IngestionError, SimulationOrderError
from .hazard import (
    DAYS_PER_YEAR,
    CoefficientTable,
    RiskGroup,
    compute_risk,
    default_coefficients,
)

logger = logging.getLogger(__name__)


PROFILE_LEVEL_FIELDS = (
    "sex",
    "ethnicity",
    "race",
    "employment",
    "drug_abuse",
    "prior_felonies",
    "offense_type",
    "supervision",
)

REQUIRED_COLUMNS = PROFILE_LEVEL_FIELDS + ("age_category", "probation_term_days")
OPTIONAL_COLUMNS = ("weight", "initial_age_years", "prior_arrests", "rearrested")

# Marginals of the bundled synthetic cohort, one probability per level.
DEFAULT_MARGINALS = {
    "sex": (0.82, 0.18),
    "ethnicity": (0.12, 0.88),
    "race": (0.45, 0.50, 0.02, 0.01, 0.02),
    "employment": (0.45, 0.35, 0.20),
    "drug_abuse": (0.45, 0.30, 0.25),
    "prior_felonies": (0.55, 0.25, 0.20),
    "offense_type": (0.02, 0.04, 0.10, 0.14, 0.18, 0.22, 0.06, 0.24),
    "supervision": (0.10, 0.25, 0.25, 0.20, 0.12, 0.08),
    "age_category": (0.12, 0.28, 0.20, 0.25, 0.11, 0.04),
    "prior_arrests": (0.50, 0.30, 0.15, 0.05),
    "rearrested": (0.80, 0.20),
}

WEIGHT_TOLERANCE = 1e-9
RENORMALIZE_TOLERANCE = 1e-3


@dataclass(frozen=True)
class CovariateProfile:
    sex: int
    ethnicity: int
    race: int
    employment: int
    drug_abuse: int
    prior_felonies: int
    offense_type: int
    supervision: int
    age_category: int
    probation_term_days: float
    initial_age_years: Optional[float] = None
    prior_arrests: int = 0
    rearrested: Optional[int] = None

    def __post_init__(self):
        if not self.probation_term_days > 0:
            raise DomainError(
                f"probation_term_days must be > 0, got {self.probation_term_days}"
            )
        if self.prior_arrests < 0:
            raise DomainError(f"prior_arrests must be >= 0, got {self.prior_arrests}")


@dataclass
class Individual:
    """
    Agent record. ``generation`` invalidates pending end-probation and exit
    events; ``offense_generation`` invalidates the pending offense event.
    """

    id: int
    profile: Optional[CovariateProfile] = None
    arrival_time: float = 0.0
    initial_age_days: float = 0.0
    age_days: float = 0.0
    offense_count: int = 0
    return_count: int = 0
    off_probation: bool = False
    not_decided: bool = True
    treated: bool = False
    probation_term: float = 0.0
    off_probation_term: float = 0.0
    exit_time: float = 0.0
    risk_group: Optional[RiskGroup] = None
    generation: int = 0
    offense_generation: int = 0

    @property
    def end_probation_time(self) -> float:
        return self.arrival_time + self.probation_term


class CovariateDistribution:
    """
    Categorical distribution over covariate profiles, Pr(ξ = support[k]) = weights[k].
    """

    def __init__(
        self,
        support: Sequence[CovariateProfile],
        weights: Optional[Sequence[float]] = None,
        age_bounds: Optional[Mapping[int, Tuple[float, float]]] = None,
    ):
        if not support:
            raise ImproperlyConfigured("A covariate distribution needs at least one profile.")
        self.support = tuple(support)
        if weights is None:
            weights = np.full(len(self.support), 1.0 / len(self.support))
        self.weights = np.asarray(weights, dtype=float)
        if self.weights.shape != (len(self.support),):
            raise ImproperlyConfigured(
                f"Got {self.weights.size} weights for {len(self.support)} profiles."
            )
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ImproperlyConfigured("Profile weights must be finite and nonnegative.")
        if abs(self.weights.sum() - 1.0) > WEIGHT_TOLERANCE:
            raise ImproperlyConfigured(
                f"Profile weights must sum to 1, got {self.weights.sum():.12g}"
            )
        bounds = age_bounds or get_config("AGE_CATEGORY_BOUNDS")
        self.age_bounds = {int(k): (float(lo), float(hi)) for k, (lo, hi) in bounds.items()}
        for profile in self.support:
            if profile.age_category not in self.age_bounds:
                raise ImproperlyConfigured(
                    f"No age bounds configured for age category {profile.age_category}"
                )
        self._cdf = np.cumsum(self.weights)

    def __len__(self):
        return len(self.support)

    def reference_age_years(self, profile: CovariateProfile) -> float:
        """Observed initial age, or the middle of the profile's age category."""
        if profile.initial_age_years is not None:
            return float(profile.initial_age_years)
        low, high = self.age_bounds[profile.age_category]
        return 0.5 * (low + high)

    def reweighted(self, kind: Optional[str]) -> "CovariateDistribution":
        if kind in (None, "", "empirical"):
            return self
        if kind == "uniform":
            weights = None
        elif kind == "younger":
            weights = younger_weights(self)
        else:
            raise ImproperlyConfigured(
                f"Unknown cohort reweighting '{kind}' (expected empirical, uniform or younger)"
            )
        return CovariateDistribution(self.support, weights, self.age_bounds)

    @property
    def mean_probation_term(self) -> float:
        terms = np.array([p.probation_term_days for p in self.support])
        return float(np.dot(self.weights, terms))

    @property
    def rearrest_fraction(self) -> Optional[float]:
        """Weighted share of profiles flagged as rearrested within a year."""
        flagged = [
            (w, p.rearrested) for w, p in zip(self.weights, self.support) if p.rearrested is not None
        ]
        if not flagged:
            return None
        total = sum(w for w, _ in flagged)
        if total == 0:
            return None
        return float(sum(w * r for w, r in flagged) / total)

    def draw_index(self, rng: np.random.Generator) -> int:
        index = int(np.searchsorted(self._cdf, rng.random() * self._cdf[-1], side="right"))
        return min(index, len(self.support) - 1)


def younger_weights(dist: CovariateDistribution) -> np.ndarray:
    """ρ_k = (100 − a_k) / Σ_j (100 − a_j), which favours younger profiles."""
    slack = np.array([100.0 - dist.reference_age_years(p) for p in dist.support])
    if np.any(slack < 0):
        raise DomainError("The younger reweighting needs every profile age <= 100")
    return slack / slack.sum()


class ExponentialTerm:
    """Exponential term; a zero mean gives a zero-length term."""

    def __init__(self, mean_days: float):
        if mean_days < 0:
            raise ImproperlyConfigured(f"Exponential term mean must be >= 0, got {mean_days}")
        self.mean_days = float(mean_days)

    def sample(self, rng: np.random.Generator, profile: CovariateProfile = None) -> float:
        if self.mean_days == 0:
            return 0.0
        return float(rng.exponential(self.mean_days))


class LogNormalTerm:
    """Log-normal term with the given mean, clipped to [low, high] days."""

    def __init__(self, mean_days=1375.0, sigma=0.6, low=30.0, high=4320.0):
        if not mean_days > 0 or not sigma > 0 or not 0 < low < high:
            raise ImproperlyConfigured("Invalid log-normal term parameters")
        self.mean_days = float(mean_days)
        self.sigma = float(sigma)
        self.low = float(low)
        self.high = float(high)
        self.log_mean = math.log(self.mean_days) - 0.5 * self.sigma**2

    def sample(self, rng: np.random.Generator, profile: CovariateProfile = None) -> float:
        return float(np.clip(rng.lognormal(self.log_mean, self.sigma), self.low, self.high))


class EmpiricalTerm:
    """The probation term observed with the profile."""

    def sample(self, rng: np.random.Generator, profile: CovariateProfile) -> float:
        return float(profile.probation_term_days)


def sample_profile(dist: CovariateDistribution, rng: np.random.Generator) -> CovariateProfile:
    """
    Draw a profile with probability ρ_k and give it an initial age, uniform
    within its age category unless the profile carries an observed age.
    """
    profile = dist.support[dist.draw_index(rng)]
    if profile.initial_age_years is not None:
        return profile
    low, high = dist.age_bounds[profile.age_category]
    return replace(profile, initial_age_years=float(rng.uniform(low, high)))


def age_at(individual: Individual, t: float) -> float:
    return individual.initial_age_days + (t - individual.arrival_time)


def init_individual(
    individual: Individual,
    t: float,
    is_return: bool,
    dist: CovariateDistribution,
    prob_term,
    off_term,
    covariate_rng: np.random.Generator,
    term_rng: np.random.Generator,
) -> Individual:
    """
    Start a probation term at time ``t``. Fresh arrivals get a sampled profile
    and untreated, undecided flags; returning individuals keep their profile,
    treatment and decision flags and continue their age clock. The caller
    schedules the end-probation, exit and first offense events.
    """
    if t < 0:
        raise DomainError(f"init_individual needs t >= 0, got {t}")
    if is_return:
        individual.initial_age_days = age_at(individual, t)
    else:
        profile = sample_profile(dist, covariate_rng)
        individual.profile = profile
        individual.initial_age_days = profile.initial_age_years * DAYS_PER_YEAR
        individual.offense_count = profile.prior_arrests
        individual.treated = False
        individual.not_decided = True
        individual.off_probation = False
    individual.arrival_time = t
    individual.age_days = individual.initial_age_days
    individual.probation_term = prob_term.sample(term_rng, individual.profile)
    individual.off_probation_term = off_term.sample(term_rng, individual.profile)
    individual.exit_time = t + individual.probation_term + individual.off_probation_term
    individual.generation += 1
    individual.offense_generation += 1
    return individual


def update_dynamics(individual: Individual, t: float, kind: Union[EventKind, str]) -> Individual:
    if t < individual.arrival_time:
        raise SimulationOrderError(
            f"Individual {individual.id} saw time {t} before its arrival at "
            f"{individual.arrival_time}"
        )
    individual.age_days = age_at(individual, t)
    if EventKind(kind) is EventKind.OFFENSE:
        individual.offense_count += 1
    return individual


def reference_scores(dist: CovariateDistribution, table: CoefficientTable, mu: float = 0.0) -> np.ndarray:
    """Untreated t=0 risk of every support profile, at its reference age."""
    return np.array(
        [
            compute_risk(
                profile,
                dist.reference_age_years(profile) * DAYS_PER_YEAR,
                profile.prior_arrests,
                mu,
                False,
                table,
            ).value
            for profile in dist.support
        ]
    )


def classify_risk_group(scores: Sequence[float], i_risk: float) -> RiskGroup:
    """High risk when at or above the median of the reference scores."""
    if len(scores) == 0:
        raise DomainError("classify_risk_group needs at least one reference score")
    return RiskGroup.HIGH if i_risk >= float(np.median(scores)) else RiskGroup.LOW


def _row_int(row, column, line):
    value = row[column]
    if pd.isna(value):
        raise IngestionError(f"{column}: missing value", row=line)
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise IngestionError(f"{column}: '{value}' is not a number", row=line)
    if not number.is_integer():
        raise IngestionError(f"{column}: '{value}' is not an integer level", row=line)
    return int(number)


def load_profiles(
    path: Union[str, Path],
    table: Optional[CoefficientTable] = None,
    age_bounds: Optional[Mapping[int, Tuple[float, float]]] = None,
) -> CovariateDistribution:
    """
    Read a cohort CSV, one profile per row. Columns: the eight categorical
    levels, age_category and probation_term_days; weight, initial_age_years,
    prior_arrests and rearrested are optional. Without a weight column every
    profile is equally likely.
    """
    table = table or default_coefficients()
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise IngestionError(f"Failed to read cohort file '{path}': {e}")

    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise IngestionError(f"Cohort file '{path}' is missing columns: {', '.join(missing)}")

    domains = {f: table.level_range(f) for f in PROFILE_LEVEL_FIELDS}
    domains["age_category"] = table.level_range("age")

    profiles = []
    for index, row in frame.iterrows():
        # Header is line 1.
        line = int(index) + 2
        levels = {}
        for column, (low, high) in domains.items():
            level = _row_int(row, column, line)
            if not low <= level <= high:
                raise IngestionError(f"{column}: level {level} outside [{low},{high}]", row=line)
            levels[column] = level

        term = row["probation_term_days"]
        if pd.isna(term) or not float(term) > 0:
            raise IngestionError(f"probation_term_days: must be > 0, got {term}", row=line)

        extras = {}
        if "initial_age_years" in frame.columns and not pd.isna(row["initial_age_years"]):
            extras["initial_age_years"] = float(row["initial_age_years"])
        if "prior_arrests" in frame.columns and not pd.isna(row["prior_arrests"]):
            extras["prior_arrests"] = _row_int(row, "prior_arrests", line)
            if extras["prior_arrests"] < 0:
                raise IngestionError("prior_arrests: must be >= 0", row=line)
        if "rearrested" in frame.columns and not pd.isna(row["rearrested"]):
            flag = _row_int(row, "rearrested", line)
            if flag not in (0, 1):
                raise IngestionError(f"rearrested: expected 0 or 1, got {flag}", row=line)
            extras["rearrested"] = flag

        profiles.append(
            CovariateProfile(probation_term_days=float(term), **levels, **extras)
        )

    if not profiles:
        raise IngestionError(f"Cohort file '{path}' has no profiles")

    weights = None
    if "weight" in frame.columns:
        if frame["weight"].isna().any():
            line = int(frame.index[frame["weight"].isna()][0]) + 2
            raise IngestionError("weight: missing value", row=line)
        weights = frame["weight"].to_numpy(dtype=float)
        if np.any(weights < 0):
            line = int(np.argmax(weights < 0)) + 2
            raise IngestionError("weight: must be >= 0", row=line)
        total = weights.sum()
        drift = abs(total - 1.0)
        if drift > RENORMALIZE_TOLERANCE:
            raise IngestionError(f"weights sum to {total:.6g}, expected 1")
        if drift > WEIGHT_TOLERANCE:
            logger.warning("Cohort '%s' weights sum to %.9g; renormalising", path, total)
            weights = weights / total
    return CovariateDistribution(profiles, weights, age_bounds)


def write_profiles(
    dist: CovariateDistribution, path: Union[str, Path], include_weights: bool = True
) -> Path:
    rows = []
    for weight, profile in zip(dist.weights, dist.support):
        row = asdict(profile)
        if include_weights:
            row["weight"] = weight
        rows.append(row)
    columns = [f.name for f in fields(CovariateProfile)]
    frame = pd.DataFrame(rows, columns=columns + (["weight"] if include_weights else []))
    frame = frame.dropna(axis=1, how="all")
    frame.to_csv(path, index=False)
    return Path(path)


def synthetic_cohort(
    size: int,
    marginals: Optional[Dict[str, Sequence[float]]] = None,
    rng: Optional[np.random.Generator] = None,
    term_mean_days: float = 1375.0,
    term_sigma: float = 0.6,
    age_bounds: Optional[Mapping[int, Tuple[float, float]]] = None,
) -> CovariateDistribution:
    """
    Draw ``size`` profiles with independent categorical levels. Levels are
    numbered from 1 except ``prior_arrests`` and ``rearrested``, which count
    from 0. Terms are log-normal with the given mean, clipped to [30, 4320].
    """
    if size < 1:
        raise ImproperlyConfigured(f"Synthetic cohort size must be >= 1, got {size}")
    rng = rng if rng is not None else np.random.default_rng()
    probs = dict(DEFAULT_MARGINALS)
    unknown = set(marginals or {}) - set(probs)
    if unknown:
        raise ImproperlyConfigured(f"Unknown marginals: {', '.join(sorted(unknown))}")
    probs.update(marginals or {})

    draws = {}
    for name, p in probs.items():
        p = np.asarray(p, dtype=float)
        if np.any(p < 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-9):
            raise ImproperlyConfigured(f"Marginal for '{name}' must be a probability vector")
        offset = 0 if name in ("prior_arrests", "rearrested") else 1
        draws[name] = rng.choice(len(p), size=size, p=p) + offset

    terms = LogNormalTerm(term_mean_days, term_sigma)
    profiles = [
        CovariateProfile(
            probation_term_days=round(terms.sample(rng), 1),
            **{name: int(draws[name][k]) for name in draws},
        )
        for k in range(size)
    ]
    return CovariateDistribution(profiles, age_bounds=age_bounds)
