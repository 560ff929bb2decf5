from cli.management.base import StageCommand
from cli.services import run_align


class Command(StageCommand):
    help = "Удаление земли и выбросов, выравнивание кадров ICP: poses.txt"
    stage = "align"

    def run(self, workspace, config, options):
        return run_align(workspace, config)
