from ...conf import get_config
from ...engine import SimulationConfig
from ...hazard import (
    calibrate_baseline_from_anchor,
    cumulative_hazard,
    default_coefficients,
    offense_probability,
)
from ...population import load_profiles
from ...scenario import median_risk
from ..base import ProbationCommand


class Command(ProbationCommand):
    help = """
    Solve for the exponential baseline rate at which treatment cuts a
    median-risk individual's offense probability over the horizon by the
    given reduction, and print it.
    """

    def add_arguments(self, parser):
        parser.add_argument(
            "--h-median",
            type=float,
            help="Median risk score; computed from the cohort when omitted",
        )
        parser.add_argument("--beta", type=float, default=0.342)
        parser.add_argument("--horizon", type=float, default=730.0, help="Days")
        parser.add_argument("--reduction", type=float, default=0.25)
        parser.add_argument("--cohort", type=str, help="Cohort CSV for --h-median auto")
        parser.add_argument(
            "--reweighting",
            choices=["empirical", "uniform", "younger"],
            help="Cohort reweighting applied before taking the median",
        )
        parser.add_argument(
            "--mu-scale",
            type=float,
            default=100.0,
            help="Multiplier applied to μ(0) in the cohort median",
        )

    def run(self, *args, **options):
        h_med = options.get("h_median")
        if h_med is None:
            table = default_coefficients()
            dist = load_profiles(options.get("cohort") or get_config("COHORT_PATH"), table)
            dist = dist.reweighted(options.get("reweighting"))
            h_med = median_risk(dist, table, SimulationConfig(mu_scale=options["mu_scale"]))
            self.stdout.write(f"cohort median risk h = {h_med:.6f}")

        beta, horizon = options["beta"], options["horizon"]
        base = calibrate_baseline_from_anchor(h_med, beta, horizon, options["reduction"])
        untreated = offense_probability(base, horizon, h_med)
        treated = offense_probability(base, horizon, h_med - beta)
        self.stdout.write(f"lambda0          = {base.rates[0]:.10g} per day")
        self.stdout.write(f"Lambda0({horizon:g}) = {cumulative_hazard(base, horizon):.6f}")
        self.stdout.write(f"P(offense | untreated) = {untreated:.6f}")
        self.stdout.write(f"P(offense | treated)   = {treated:.6f}")
        self.success(f"Calibrated: treated/untreated = {treated / untreated:.6f}")
