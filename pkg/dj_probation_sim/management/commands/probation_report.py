import json
import math
from pathlib import Path

from django.core.management.base import CommandError

from ...metrics import METRIC_NAMES, WINDOWS, aggregate_report
from ...scenario import EPISODES_NAME, MANIFEST_NAME, grid_points, parse_scenario, read_run_csv
from ..base import ProbationCommand


def format_estimate(estimate, digits=4):
    if math.isnan(estimate.half_width):
        return f"{estimate.mean:.{digits}f}"
    text = f"{estimate.mean:.{digits}f} ± {estimate.half_width:.{digits}f}"
    return f"{text} {estimate.marker}".rstrip()


class Command(ProbationCommand):
    help = """
    Re-aggregate a finished run and print, per grid point and window, each
    policy's metric means and their deltas against the null policy.
    """

    def add_arguments(self, parser):
        parser.add_argument("output_dir", help="Directory written by probation_run")
        parser.add_argument(
            "--metric",
            action="append",
            dest="metrics",
            choices=METRIC_NAMES,
            help="Metric to report (repeatable, default offenses_per_capita)",
        )
        parser.add_argument("--window", choices=WINDOWS, help="Only this window")
        parser.add_argument(
            "--unpaired",
            action="store_true",
            help="Compare against null without pairing replications",
        )
        parser.add_argument("--short", type=int, help="Short window length in episodes")
        parser.add_argument("--long", type=int, help="Long window length in episodes")

    def run(self, *args, **options):
        output_dir = Path(options["output_dir"])
        episodes_path = output_dir / EPISODES_NAME
        manifest_path = output_dir / MANIFEST_NAME
        if not episodes_path.exists() or not manifest_path.exists():
            raise CommandError(f"'{output_dir}' has no finished run")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        scenario = parse_scenario(manifest["scenario"])
        points = {p.index: p.parameters for p in grid_points(scenario)}

        episodes = read_run_csv(episodes_path)
        reports = aggregate_report(
            episodes,
            parameters=points,
            paired=not options.get("unpaired"),
            short=options.get("short") or scenario.windows.get("short"),
            long=options.get("long") or scenario.windows.get("long"),
        )
        metrics = options.get("metrics") or ["offenses_per_capita"]
        window = options.get("window")

        self.stdout.write(f"{scenario.name}: {manifest['replications']} replications, seed {manifest['seed']}")
        current = None
        for report in sorted(reports, key=lambda r: (r.point, r.window, r.policy != "null", r.policy)):
            if window and report.window != window:
                continue
            if (report.point, report.window) != current:
                current = (report.point, report.window)
                described = ", ".join(f"{k}={v}" for k, v in report.parameters.items()) or "base"
                self.stdout.write("")
                self.stdout.write(self.style.MIGRATE_HEADING(f"[{report.window}] {described}"))
            cells = []
            for metric in metrics:
                cell = f"{metric} {format_estimate(report.means[metric])}"
                if report.policy != "null":
                    cell += f"  Δ {format_estimate(report.deltas[metric])}"
                cells.append(cell)
            self.stdout.write(f"  {report.policy:<22} " + "  |  ".join(cells))
        self.success(f"Reported {len(points)} grid points from {output_dir}")
