from cascade.models import VARIANTS
from cli.management.base import StageCommand
from cli.services import run_cascade_stage


class Command(StageCommand):
    help = "Каскад фон/передний план и два класса переднего плана: pred_cascade/, cascade.json"
    stage = "cascade"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--variant", choices=VARIANTS, default=None, help="Вариант каскада")

    def overrides(self, options):
        overrides = super().overrides(options)
        if options["variant"]:
            overrides.append(f"cascade.variant={options['variant']}")
        return overrides

    def run(self, workspace, config, options):
        report = run_cascade_stage(workspace, config, self.progress())
        summary = {"variant": report["variant"]}
        if "cascade" in report:
            summary["miou"] = report["cascade"]["miou"]
        if "fgbg" in report:
            summary["foreground_iou"] = report["fgbg"]["per_class_iou"]["foreground"]
        return summary
