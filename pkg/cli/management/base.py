import json

from django.conf import settings
from django.core.management import BaseCommand, CommandError

from cli.models import Workspace
from cli.services import error_record, is_fresh, load_config, stage_hash
from cloud.exceptions import PipelineError


class StageCommand(BaseCommand):
    """Стадия пайплайна над рабочим каталогом.

    Ошибка пайплайна превращается в JSON-запись (stderr и error.json) и код выхода 2.
    Повторный запуск с той же конфигурацией пропускается, если отметка стадии совпадает.
    """

    stage = None
    cached = True

    def add_arguments(self, parser):
        parser.add_argument("--workdir", default=str(settings.PIPELINE_WORKDIR), help="Рабочий каталог стадий")
        parser.add_argument("--config", default=None, help="YAML-файл конфигурации (по умолчанию PIPELINE_CONFIG)")
        parser.add_argument("--seed", type=int, default=None, help="Сид, переопределяет seed из файла")
        parser.add_argument("--threads", type=int, default=None, help="Число потоков обработки кадров")
        parser.add_argument(
            "--set", action="append", default=[], dest="overrides", metavar="SECTION.KEY=VALUE",
            help="Переопределение параметра конфигурации, можно повторять",
        )
        parser.add_argument("--force", action="store_true", help="Выполнить стадию, даже если кэш актуален")

    def overrides(self, options):
        overrides = list(options["overrides"])
        if options.get("seed") is not None:
            overrides.append(f"seed={options['seed']}")
        if options.get("threads") is not None:
            overrides.append(f"threads={options['threads']}")
        return overrides

    def handle(self, *args, **options):
        workspace = Workspace(options["workdir"])
        try:
            config = load_config(options["config"], self.overrides(options))
            digest = stage_hash(self.stage, workspace, config)
            if self.cached and not options["force"] and is_fresh(self.stage, workspace, digest):
                self.stdout.write(f"{self.stage}: кэш актуален, стадия пропущена")
                return
            summary = self.run(workspace, config, options)
            workspace.write_stamp(self.stage, digest, summary=summary)
        except PipelineError as error:
            record = error_record(self.stage, error)
            workspace.write_error(record)
            self.stderr.write(json.dumps(record, ensure_ascii=False))
            raise CommandError(record["message"], returncode=2) from error
        workspace.clear_error()
        self.stdout.write(self.style.SUCCESS(f"{self.stage}: {json.dumps(summary, ensure_ascii=False)}"))

    def run(self, workspace, config, options):
        raise NotImplementedError

    def progress(self):
        return self.stderr.isatty()
