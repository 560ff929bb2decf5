from cli.management.base import StageCommand
from cli.services import run_synth


class Command(StageCommand):
    help = "Синтетическая последовательность с истинной разметкой: clouds/, labels/, poses_gt.txt"
    stage = "synth"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--scene", default=None, help="demo, intersection, random или путь к YAML-сцене")
        parser.add_argument("--frames", type=int, default=None, help="Число кадров")

    def overrides(self, options):
        overrides = super().overrides(options)
        if options["scene"]:
            overrides.append(f"synth.scene={options['scene']}")
        if options["frames"] is not None:
            overrides.append(f"synth.frames={options['frames']}")
        return overrides

    def run(self, workspace, config, options):
        return run_synth(workspace, config)
