from django.core.management.base import CommandError

from ...scenario import load_scenario, run_scenario, run_scenario_from_manifest
from ..base import ProbationCommand


class Command(ProbationCommand):
    help = """
    Run a scenario: every policy, grid point and replication. Writes
    episodes.csv, aggregate.csv and manifest.json to the output directory.
    """

    def add_arguments(self, parser):
        parser.add_argument(
            "scenario",
            nargs="?",
            help="Scenario file, or the name of a bundled scenario",
        )
        parser.add_argument("--output-dir", type=str, help="Where to write results")
        parser.add_argument("--workers", type=int, help="Worker processes")
        parser.add_argument("--seed", type=int, help="Override the scenario's base seed")
        parser.add_argument(
            "--policy",
            action="append",
            dest="policies",
            help="Restrict to this policy (repeatable); null is always included",
        )
        parser.add_argument(
            "--manifest",
            type=str,
            help="Re-run the scenario recorded in a manifest.json",
        )

    def run(self, *args, **options):
        if options.get("manifest"):
            run_scenario_from_manifest(
                options["manifest"],
                output_dir=options.get("output_dir"),
                workers=options.get("workers"),
            )
            self.success(f"Re-ran {options['manifest']}")
            return
        if not options.get("scenario"):
            raise CommandError("Give a scenario or --manifest")
        scenario = load_scenario(options["scenario"])
        status = run_scenario(
            scenario,
            output_dir=options.get("output_dir"),
            workers=options.get("workers"),
            seed=options.get("seed"),
            policies=options.get("policies"),
        )
        if status == 0:
            self.success(f"Successfully ran scenario {scenario.name}")
