from django.apps import AppConfig


class PreprocessConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'preprocess'
    verbose_name = "Удаление земли, SOR и ICP-выравнивание"
