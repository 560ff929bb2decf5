from django.apps import AppConfig


class EvalkitConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'evalkit'
    verbose_name = "Оценка mIoU"
