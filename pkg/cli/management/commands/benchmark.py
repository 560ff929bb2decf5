from cli.management.base import StageCommand
from cli.services import run_benchmark
from learn.models import MODES


class Command(StageCommand):
    help = "train -> segment -> eval для списка режимов с общим сидом и бюджетом: benchmark.json"
    stage = "benchmark"
    cached = False

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--modes", nargs="+", choices=MODES, default=list(MODES), help="Сравниваемые режимы")
        parser.add_argument(
            "--scenes", type=int, default=0,
            help="Синтезировать столько случайных сцен в bench/ вместо текущего рабочего каталога",
        )

    def run(self, workspace, config, options):
        summary = run_benchmark(workspace, config, options["modes"], options["scenes"], self.progress())
        return {mode: result["miou"] for mode, result in summary["modes"].items()}
