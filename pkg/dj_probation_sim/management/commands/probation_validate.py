from django.core.management.base import CommandError

from ...checks import all_passed, run_checks, run_regime_checks, summarize
from ...scenario import grid_points, load_scenario
from ..base import ProbationCommand


class Command(ProbationCommand):
    help = """
    Parse a scenario, expand its grid, and run the invariant suite on small
    instances of its base configuration. With --run, evaluate the policy-regime
    checks on a finished run instead.
    """

    def add_arguments(self, parser):
        parser.add_argument(
            "scenario",
            nargs="?",
            default="baseline",
            help="Scenario file, or a bundled scenario name (default baseline)",
        )
        parser.add_argument(
            "--parse-only",
            action="store_true",
            help="Stop after parsing and grid expansion",
        )
        parser.add_argument("--replications", type=int, default=3)
        parser.add_argument(
            "--run",
            dest="run_dir",
            help="Output directory of a finished run to evaluate",
        )

    def run(self, *args, **options):
        if options.get("run_dir"):
            results = run_regime_checks(options["run_dir"])
            if not results:
                raise CommandError(f"No regime checks apply to the run in '{options['run_dir']}'")
            return self.report(results)

        scenario = load_scenario(options["scenario"])
        points = grid_points(scenario)
        units = len(points) * len(scenario.policies) * scenario.replications
        self.success(
            f"{scenario.name}: {len(points)} grid points, "
            f"{len(scenario.policies)} policies, {units} units"
        )
        if options.get("parse_only"):
            return
        self.report(run_checks(scenario, replications=options["replications"]))

    def report(self, results):
        self.stdout.write(summarize(results))
        if not all_passed(results):
            raise CommandError(f"{sum(not r.passed for r in results)} checks failed")
        self.success("All checks passed")
