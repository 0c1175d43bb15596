from ...scenario import load_scenario, parse_axis_option, run_scenario
from ..base import ProbationCommand


class Command(ProbationCommand):
    help = """
    Run a scenario with extra or replacement sweep axes, for example
    --axis delta_inc=0,0.024,0.048 --axis capacity=80,200.
    """

    def add_arguments(self, parser):
        parser.add_argument("scenario", help="Scenario file, or a bundled scenario name")
        parser.add_argument(
            "--axis",
            action="append",
            dest="axes",
            required=True,
            help="name=v1,v2,... (repeatable)",
        )
        parser.add_argument("--output-dir", type=str, help="Where to write results")
        parser.add_argument("--workers", type=int, help="Worker processes")
        parser.add_argument("--seed", type=int, help="Override the scenario's base seed")
        parser.add_argument("--policy", action="append", dest="policies")

    def run(self, *args, **options):
        axes = dict(parse_axis_option(option) for option in options["axes"])
        scenario = load_scenario(options["scenario"]).with_axes(axes)
        run_scenario(
            scenario,
            output_dir=options.get("output_dir"),
            workers=options.get("workers"),
            seed=options.get("seed"),
            policies=options.get("policies"),
        )
        sizes = " × ".join(f"{name}[{len(values)}]" for name, values in scenario.axes.items())
        self.success(f"Successfully swept {scenario.name} over {sizes}")
