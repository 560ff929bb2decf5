from cli.management.base import StageCommand
from cli.services import run_segment


class Command(StageCommand):
    help = "Кластер для каждой точки: pred/*.label и, по желанию, цветные PLY"
    stage = "segment"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--ply", action="store_true", help="Сохранить pred/*.ply с цветом кластера")

    def run(self, workspace, config, options):
        return run_segment(workspace, config, ply=options["ply"])
