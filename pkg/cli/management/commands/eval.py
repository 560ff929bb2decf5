from cli.management.base import StageCommand
from cli.services import run_eval


class Command(StageCommand):
    help = "mIoU предсказаний против истинной разметки: report.json"
    stage = "eval"

    def run(self, workspace, config, options):
        report = run_eval(workspace, config)
        return {"miou": report["miou"], "points": report["point_counts"]["total"]}
