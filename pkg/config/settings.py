import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Quick-start development settings - unsuitable for production
# See https://docs.djangoproject.com/en/4.2/howto/deployment/checklist/

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.getenv('SECRET_KEY', 'lidar-stseg-local-key')

# SECURITY WARNING: don't run with debug turned on in production!
DEBUG = os.getenv('DEBUG', False) == 'True'

ALLOWED_HOSTS = []

# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'rest_framework',
    'cloud',
    'preprocess',
    'dynamics',
    'tracking',
    'correspond',
    'learn',
    'evalkit',
    'cascade',
    'synth',
    'cli',
]

# Пайплайн работает с файлами, база данных не нужна
DATABASES = {}

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = True

USE_TZ = True

REST_FRAMEWORK = {
    "UNAUTHENTICATED_USER": None,
}

# Рабочий каталог стадий: clouds/, poses.txt, scores/, corr/, ckpt/, pred/, report.json
PIPELINE_WORKDIR = Path(os.getenv('PIPELINE_WORKDIR', BASE_DIR / 'work'))
PIPELINE_CONFIG = os.getenv('PIPELINE_CONFIG', str(BASE_DIR / 'pipeline.example.yaml'))
PIPELINE_THREADS = int(os.getenv('PIPELINE_THREADS', 1))
PIPELINE_SEED = int(os.getenv('PIPELINE_SEED', 0))

LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'pipeline': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'pipeline',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': LOG_LEVEL,
    },
}
