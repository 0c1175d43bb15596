"""
Discrete-event probation simulation.

Individuals arrive, serve a probation term and an off-probation tracking term,
and may offend along the way. Every ``t_e`` days the engine records a
snapshot, refreshes the community offense rate μ and lets the treatment policy
assign capacity to undecided individuals.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
from django.core.exceptions import ImproperlyConfigured

from .events import Event, EventKind, EventQueue
from .exceptions import PolicyContractError, SimulationOrderError
from .hazard import (
    BaselineHazard,
    BetaSpec,
    CoefficientTable,
    RiskGroup,
    RiskScore,
    compute_risk,
    sample_offense_time,
    weighted_median,
)
from .policy import Candidate, PolicyKind, TreatmentPolicy, get_policy
from .population import (
    CovariateDistribution,
    EmpiricalTerm,
    ExponentialTerm,
    Individual,
    LogNormalTerm,
    age_at,
    classify_risk_group,
    init_individual,
    reference_scores,
    update_dynamics,
)
from .seeds import stream_rngs

logger = logging.getLogger(__name__)

PROB_TERM_SOURCES = ("empirical", "lognormal")


@dataclass(frozen=True)
class SimulationConfig:
    t_max: float = 30000.0
    t_e: float = 100.0
    capacity: int = 80
    delta_inc: float = 0.048
    delta_inc_off_probation: Optional[float] = None
    r_inc: int = 30
    arrival_mean_days: float = 5.0
    prob_term_source: str = "empirical"
    prob_term_mean: float = 1375.0
    prob_term_sigma: float = 0.6
    off_mean_days: float = 1000.0
    initial_population: int = 0
    initial_mu: Optional[float] = None
    mu_scale: float = 1.0
    policy: str = PolicyKind.NULL.value
    beta_spec: Optional[BetaSpec] = None
    age_bucket_years: Optional[float] = None
    seed: int = 0
    replication: int = 0
    stream_salt: str = ""
    resample_on_treatment: bool = True
    reset_treatment_on_return: bool = False

    def __post_init__(self):
        problems = []
        if not self.t_e > 0:
            problems.append(f"t_e must be > 0, got {self.t_e}")
        if not self.t_max >= 0:
            problems.append(f"t_max must be >= 0, got {self.t_max}")
        if self.capacity < 0 or int(self.capacity) != self.capacity:
            problems.append(f"capacity must be a nonnegative integer, got {self.capacity}")
        for name in ("delta_inc", "delta_inc_off_probation"):
            value = getattr(self, name)
            if value is not None and not 0 <= value <= 1:
                problems.append(f"{name} must lie in [0, 1], got {value}")
        if self.r_inc < 0:
            problems.append(f"r_inc must be >= 0, got {self.r_inc}")
        if not self.arrival_mean_days > 0:
            problems.append(f"arrival_mean_days must be > 0, got {self.arrival_mean_days}")
        if self.prob_term_source not in PROB_TERM_SOURCES:
            problems.append(
                f"prob_term_source must be one of {', '.join(PROB_TERM_SOURCES)}, "
                f"got '{self.prob_term_source}'"
            )
        if not self.prob_term_mean > 0 or not self.prob_term_sigma > 0:
            problems.append("prob_term_mean and prob_term_sigma must be > 0")
        if self.off_mean_days < 0:
            problems.append(f"off_mean_days must be >= 0, got {self.off_mean_days}")
        if self.initial_population < 0:
            problems.append(f"initial_population must be >= 0, got {self.initial_population}")
        if self.initial_mu is not None and self.initial_mu < 0:
            problems.append(f"initial_mu must be >= 0, got {self.initial_mu}")
        if self.mu_scale < 0:
            problems.append(f"mu_scale must be >= 0, got {self.mu_scale}")
        if self.beta_spec is not None and not isinstance(self.beta_spec, BetaSpec):
            problems.append("beta_spec must be a BetaSpec")
        if problems:
            raise ImproperlyConfigured("Invalid simulation config: " + "; ".join(problems))

    @property
    def episodes(self) -> int:
        return int(self.t_max // self.t_e)

    @property
    def off_probation_delta(self) -> float:
        if self.delta_inc_off_probation is None:
            return self.delta_inc
        return self.delta_inc_off_probation

    def as_dict(self) -> dict:
        data = asdict(self)
        if self.beta_spec is not None:
            data["beta_spec"] = {"low": self.beta_spec.low, "high": self.beta_spec.high}
        return data


@dataclass(frozen=True)
class Snapshot:
    episode: int
    population: int
    offenses: int
    enrollment: int
    mu: float
    incarcerations: int = 0
    completions: int = 0
    arrivals: int = 0
    returns: int = 0
    population_low: int = 0
    population_high: int = 0
    offenses_low: int = 0
    offenses_high: int = 0
    completions_low: int = 0
    completions_high: int = 0
    capacity_overflow: int = 0
    treated_assigned: int = 0


EPISODE_COUNTERS = (
    "offenses",
    "incarcerations",
    "completions",
    "arrivals",
    "returns",
    "offenses_low",
    "offenses_high",
    "completions_low",
    "completions_high",
)


@dataclass
class SimulationResult:
    snapshots: List[Snapshot]
    initial_population: int = 0
    arrivals_total: int = 0
    completions_total: int = 0
    incarcerations_total: int = 0
    returns_total: int = 0
    offenses_total: int = 0
    active: int = 0
    pending_returns: int = 0
    max_return_count: int = 0
    max_enrollment: int = 0
    capacity_overflow_total: int = 0
    extra: dict = field(default_factory=dict)

    def conservation_holds(self) -> bool:
        return self.arrivals_total + self.initial_population == (
            self.completions_total
            + self.incarcerations_total
            + self.active
            + self.pending_returns
        )


def resolve_initial_mu(config: SimulationConfig, dist: CovariateDistribution) -> float:
    """
    μ(0): the configured value, else the cohort's first-year rearrest fraction
    rescaled to one episode.
    """
    if config.initial_mu is not None:
        return float(config.initial_mu)
    fraction = dist.rearrest_fraction
    if fraction is None:
        logger.warning(
            "Cohort has no rearrested column and initial_mu is unset; starting with mu=0"
        )
        return 0.0
    return fraction * config.t_e / 365.0


class Simulation:
    """
    One replication. Not thread safe; each instance owns its queue, its
    individuals and its random substreams.
    """

    def __init__(
        self,
        config: SimulationConfig,
        dist: CovariateDistribution,
        table: CoefficientTable,
        base: BaselineHazard,
        policy: Optional[TreatmentPolicy] = None,
    ):
        self.config = config
        self.dist = dist
        self.table = table.with_beta(config.beta_spec) if config.beta_spec else table
        self.base = base
        self.policy = policy or get_policy(config.policy, bucket_years=config.age_bucket_years)

        rngs = stream_rngs(config.seed, config.replication, config.stream_salt)
        self.arrival_rng = rngs["arrivals"]
        self.covariate_rng = rngs["covariates"]
        self.offense_rng = rngs["offense-times"]
        self.incarceration_rng = rngs["incarceration"]
        self.arrival_term_rng = rngs["arrival-terms"]
        self.return_term_rng = rngs["return-terms"]

        if config.prob_term_source == "empirical":
            self.prob_term = EmpiricalTerm()
        else:
            self.prob_term = LogNormalTerm(config.prob_term_mean, config.prob_term_sigma)
        self.off_term = ExponentialTerm(config.off_mean_days)

        self.queue = EventQueue()
        self.clock = 0.0
        self.episode = 0
        self.active: Dict[int, Individual] = {}
        self.returning: Dict[int, Individual] = {}
        self._next_id = 0

        self.initial_mu = resolve_initial_mu(config, dist)
        self.mu = self.initial_mu
        self.risk_threshold: Optional[float] = None

        self.counters = dict.fromkeys(EPISODE_COUNTERS, 0)
        self.totals = dict.fromkeys(EPISODE_COUNTERS, 0)
        self.snapshots: List[Snapshot] = []
        self.max_return_count = 0
        self.max_enrollment = 0
        self.capacity_overflow_total = 0
        self._started = False

    def risk(self, individual: Individual, treated: Optional[bool] = None) -> RiskScore:
        return compute_risk(
            individual.profile,
            individual.age_days,
            individual.offense_count,
            self.mu * self.config.mu_scale,
            individual.treated if treated is None else treated,
            self.table,
            individual.risk_group,
        )

    def _reference_risk(self, individual: Individual) -> float:
        # Untreated score under the t=0 conditions.
        return compute_risk(
            individual.profile,
            individual.initial_age_days,
            individual.offense_count,
            self.initial_mu * self.config.mu_scale,
            False,
            self.table,
        ).value

    def _count(self, name: str, individual: Optional[Individual] = None):
        self.counters[name] += 1
        self.totals[name] += 1
        if individual is not None and individual.risk_group is not None:
            suffix = "low" if individual.risk_group is RiskGroup.LOW else "high"
            grouped = f"{name}_{suffix}"
            if grouped in self.counters:
                self.counters[grouped] += 1
                self.totals[grouped] += 1

    def _new_individual(self, t: float) -> Individual:
        individual = Individual(id=self._next_id)
        self._next_id += 1
        return init_individual(
            individual,
            t,
            False,
            self.dist,
            self.prob_term,
            self.off_term,
            self.covariate_rng,
            self.arrival_term_rng,
        )

    def _schedule_term(self, individual: Individual, t: float):
        self.queue.push(
            individual.end_probation_time,
            EventKind.END_PROBATION,
            individual.id,
            individual.generation,
        )
        self.queue.push(individual.exit_time, EventKind.EXIT, individual.id, individual.generation)
        self.generate_offense(individual, t)

    def _schedule_next_arrival(self, t: float):
        gap = float(self.arrival_rng.exponential(self.config.arrival_mean_days))
        self.queue.push(t + gap, EventKind.ARRIVAL)

    def start(self):
        """Seed the initial population at t=0 and the first community arrival."""
        initial = [self._new_individual(0.0) for _ in range(self.config.initial_population)]
        if initial:
            reference = [self._reference_risk(ind) for ind in initial]
            self.risk_threshold = float(np.median(reference))
            for individual, score in zip(initial, reference):
                individual.risk_group = classify_risk_group(reference, score)
        else:
            reference = reference_scores(
                self.dist, self.table, self.initial_mu * self.config.mu_scale
            )
            self.risk_threshold = weighted_median(reference, self.dist.weights)
        for individual in initial:
            self.active[individual.id] = individual
            self._schedule_term(individual, 0.0)
        self._schedule_next_arrival(0.0)
        self._started = True

    def _classify(self, individual: Individual) -> RiskGroup:
        # The reference median is fixed at start, so it stands in for the scores.
        return classify_risk_group([self.risk_threshold], self._reference_risk(individual))

    def handle_arrival(self, t: float):
        self._count("arrivals")
        individual = self._new_individual(t)
        individual.risk_group = self._classify(individual)
        self.active[individual.id] = individual
        self._schedule_term(individual, t)
        self._schedule_next_arrival(t)

    def handle_offense(self, individual: Individual, t: float):
        update_dynamics(individual, t, EventKind.OFFENSE)
        self._count("offenses", individual)
        delta = self.config.off_probation_delta if individual.off_probation else self.config.delta_inc
        # Always consumed so the stream stays aligned across branches.
        incarcerated = self.incarceration_rng.random() < delta
        if incarcerated or individual.return_count >= self.config.r_inc:
            self._remove(individual)
            self._count("incarcerations", individual)
        elif individual.off_probation:
            individual.off_probation = False
            individual.return_count += 1
            self.max_return_count = max(self.max_return_count, individual.return_count)
            # Cancels the pending exit.
            individual.generation += 1
            individual.offense_generation += 1
            del self.active[individual.id]
            self.returning[individual.id] = individual
            self.queue.push(t, EventKind.RETURN, individual.id, individual.generation)
        else:
            self.generate_offense(individual, t)

    def handle_return(self, individual: Individual, t: float):
        self._count("returns", individual)
        del self.returning[individual.id]
        update_dynamics(individual, t, EventKind.RETURN)
        init_individual(
            individual,
            t,
            True,
            self.dist,
            self.prob_term,
            self.off_term,
            self.covariate_rng,
            self.return_term_rng,
        )
        individual.off_probation = False
        if self.config.reset_treatment_on_return:
            individual.treated = False
            individual.not_decided = True
        self.active[individual.id] = individual
        self._schedule_term(individual, t)

    def handle_end_probation(self, individual: Individual, t: float):
        update_dynamics(individual, t, EventKind.END_PROBATION)
        individual.off_probation = True

    def handle_exit(self, individual: Individual, t: float):
        update_dynamics(individual, t, EventKind.EXIT)
        self._remove(individual)
        self._count("completions", individual)

    def _remove(self, individual: Individual):
        del self.active[individual.id]
        individual.generation += 1
        individual.offense_generation += 1

    def generate_offense(self, individual: Individual, t: float):
        """
        Draw the time to the next offense from the current hazard and schedule
        it if it falls before the individual's exit.
        """
        individual.age_days = age_at(individual, t)
        individual.offense_generation += 1
        gap = sample_offense_time(self.risk(individual), self.base, self.offense_rng)
        if t + gap < individual.exit_time:
            self.queue.push(
                t + gap, EventKind.OFFENSE, individual.id, individual.offense_generation
            )

    def episode_boundary(self, p: int) -> Snapshot:
        t = p * self.config.t_e
        if t < self.clock:
            raise SimulationOrderError(f"Episode {p} boundary at {t} precedes clock {self.clock}")
        self.clock = t
        self.episode = p

        population = len(self.active)
        enrollment = sum(
            1 for ind in self.active.values() if ind.treated and not ind.off_probation
        )
        self.max_enrollment = max(self.max_enrollment, enrollment)
        offenses = self.counters["offenses"]
        mu = offenses / population if population else 0.0
        remaining = self.config.capacity - enrollment
        overflow = 0
        if remaining < 0:
            overflow = 1
            self.capacity_overflow_total += 1
            logger.warning(
                "Episode %d: enrollment %d exceeds capacity %d (returning treated individuals)",
                p,
                enrollment,
                self.config.capacity,
            )

        self.mu = mu
        candidates = []
        for individual_id in sorted(self.active):
            individual = self.active[individual_id]
            if not individual.not_decided:
                continue
            individual.age_days = age_at(individual, t)
            candidates.append(
                Candidate(
                    id=individual.id,
                    risk=self.risk(individual, treated=False).value,
                    age_days=individual.age_days,
                    on_probation=not individual.off_probation,
                )
            )
        decisions = self.policy.decide(candidates, max(remaining, 0))
        self.apply_treatment_assignment(decisions, candidates, max(remaining, 0), t)
        for candidate in candidates:
            self.active[candidate.id].not_decided = False

        groups = [ind.risk_group for ind in self.active.values()]
        snapshot = Snapshot(
            episode=p,
            population=population,
            offenses=offenses,
            enrollment=enrollment,
            mu=mu,
            incarcerations=self.counters["incarcerations"],
            completions=self.counters["completions"],
            arrivals=self.counters["arrivals"],
            returns=self.counters["returns"],
            population_low=groups.count(RiskGroup.LOW),
            population_high=groups.count(RiskGroup.HIGH),
            offenses_low=self.counters["offenses_low"],
            offenses_high=self.counters["offenses_high"],
            completions_low=self.counters["completions_low"],
            completions_high=self.counters["completions_high"],
            capacity_overflow=overflow,
            treated_assigned=len(decisions),
        )
        self.snapshots.append(snapshot)
        self.counters = dict.fromkeys(EPISODE_COUNTERS, 0)
        return snapshot

    def apply_treatment_assignment(self, decisions, candidates, remaining_capacity, t):
        eligible = {c.id for c in candidates if c.on_probation}
        if len(decisions) > remaining_capacity:
            raise PolicyContractError(
                f"Policy assigned {len(decisions)} treatments with {remaining_capacity} slots left"
            )
        unknown = set(decisions) - eligible
        if unknown:
            raise PolicyContractError(
                "Policy selected individuals that are not undecided and on probation: "
                + ", ".join(str(i) for i in sorted(unknown))
            )
        for individual_id in sorted(decisions):
            individual = self.active[individual_id]
            individual.treated = True
            if self.config.resample_on_treatment:
                self.generate_offense(individual, t)

    def _is_valid(self, event: Event) -> Optional[Individual]:
        if event.kind is EventKind.RETURN:
            individual = self.returning.get(event.individual_id)
            if individual is not None and event.token == individual.generation:
                return individual
            return None
        individual = self.active.get(event.individual_id)
        if individual is None:
            return None
        if event.kind is EventKind.OFFENSE:
            current = individual.offense_generation
        else:
            current = individual.generation
        return individual if event.token == current else None

    def dispatch(self, event: Event):
        if event.time < self.clock:
            raise SimulationOrderError(
                f"Event at {event.time} popped after clock reached {self.clock}", event=event
            )
        self.clock = event.time
        if event.kind is EventKind.ARRIVAL:
            self.handle_arrival(event.time)
            return
        individual = self._is_valid(event)
        if individual is None:
            return
        handler = {
            EventKind.OFFENSE: self.handle_offense,
            EventKind.END_PROBATION: self.handle_end_probation,
            EventKind.EXIT: self.handle_exit,
            EventKind.RETURN: self.handle_return,
        }[event.kind]
        handler(individual, event.time)

    def run_full(self) -> SimulationResult:
        if not self._started:
            self.start()
        t_max = self.config.t_max
        t_e = self.config.t_e
        episodes = self.config.episodes
        while True:
            event = self.queue.peek()
            horizon = min(event.time if event is not None else math.inf, t_max)
            if self.episode < episodes and (self.episode + 1) * t_e <= horizon:
                self.episode_boundary(self.episode + 1)
                continue
            if event is None or event.time >= t_max:
                break
            self.dispatch(self.queue.pop())

        logger.debug(
            "Replication %d (%s) finished: %d episodes, %d active, %d arrivals",
            self.config.replication,
            self.config.policy,
            len(self.snapshots),
            len(self.active),
            self.totals["arrivals"],
        )
        return SimulationResult(
            snapshots=list(self.snapshots),
            initial_population=self.config.initial_population,
            arrivals_total=self.totals["arrivals"],
            completions_total=self.totals["completions"],
            incarcerations_total=self.totals["incarcerations"],
            returns_total=self.totals["returns"],
            offenses_total=self.totals["offenses"],
            active=len(self.active),
            pending_returns=len(self.returning),
            max_return_count=self.max_return_count,
            max_enrollment=self.max_enrollment,
            capacity_overflow_total=self.capacity_overflow_total,
        )


def run(
    config: SimulationConfig,
    dist: CovariateDistribution,
    table: CoefficientTable,
    base: BaselineHazard,
) -> List[Snapshot]:
    return Simulation(config, dist, table, base).run_full().snapshots
