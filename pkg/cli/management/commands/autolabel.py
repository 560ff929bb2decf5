from cli.management.base import StageCommand
from cli.services import run_autolabel


class Command(StageCommand):
    help = "Авторазметка: scores/, boxes.csv, tracks.csv, corr/"
    stage = "autolabel"

    def run(self, workspace, config, options):
        return run_autolabel(workspace, config, self.progress())
