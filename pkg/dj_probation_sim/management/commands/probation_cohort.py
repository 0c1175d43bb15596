import numpy as np

from ...population import synthetic_cohort, write_profiles
from ..base import ProbationCommand


class Command(ProbationCommand):
    help = """
    Write a synthetic cohort CSV drawn from the bundled covariate marginals.
    """

    def add_arguments(self, parser):
        parser.add_argument("path", help="CSV file to write")
        parser.add_argument("--size", type=int, default=1000, help="Number of profiles")
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--term-mean", type=float, default=1375.0, help="Days")
        parser.add_argument("--term-sigma", type=float, default=0.6)

    def run(self, *args, **options):
        dist = synthetic_cohort(
            options["size"],
            rng=np.random.default_rng(options["seed"]),
            term_mean_days=options["term_mean"],
            term_sigma=options["term_sigma"],
        )
        path = write_profiles(dist, options["path"], include_weights=False)
        self.success(
            f"Successfully wrote {len(dist.support)} profiles to {path} "
            f"(mean term {dist.mean_probation_term:.0f} days)"
        )
