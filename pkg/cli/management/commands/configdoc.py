from django.core.management import BaseCommand

from cli.services import config_reference


class Command(BaseCommand):
    help = "Справочник всех параметров конфигурации с умолчаниями (Markdown)"

    def add_arguments(self, parser):
        parser.add_argument("--output", default=None, help="Записать в файл вместо stdout")

    def handle(self, *args, **options):
        document = config_reference()
        if options["output"]:
            with open(options["output"], "w") as stream:
                stream.write(document)
            self.stdout.write(self.style.SUCCESS(f"Справочник записан в {options['output']}"))
        else:
            self.stdout.write(document)
