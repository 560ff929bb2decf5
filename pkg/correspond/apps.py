from django.apps import AppConfig


class CorrespondConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'correspond'
    verbose_name = "Автоматические соответствия"
