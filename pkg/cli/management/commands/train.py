from cli.management.base import StageCommand
from cli.services import run_train
from learn.models import MODES


class Command(StageCommand):
    help = "Обучение сети признаков чередованием кластеризации и оптимизации: ckpt/model.ckpt"
    stage = "train"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--mode", choices=MODES, default=None, help="Режим обучения")

    def overrides(self, options):
        overrides = super().overrides(options)
        if options["mode"]:
            overrides.append(f"learn.mode={options['mode']}")
        return overrides

    def run(self, workspace, config, options):
        return run_train(workspace, config, self.progress())
