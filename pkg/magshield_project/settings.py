"""
Django settings for magshield_project project.

Only the settings machinery, the app registry, management commands and the
test runner are used; there is no database, URL routing or web server.
"""

from pathlib import Path
import os
from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent
env_path = os.path.join(BASE_DIR, ".env")
load_dotenv(env_path)


SECRET_KEY = os.getenv("DJANGO_SECRET_KEY", "magshield-offline-toolkit")

DEBUG = os.getenv("DEBUG", "False").lower() == "true"

ALLOWED_HOSTS: list[str] = []


# Application definition

INSTALLED_APPS = [
    'shield',
]

# No persistence layer; tests use SimpleTestCase.
DATABASES: dict = {}

USE_TZ = True
TIME_ZONE = 'UTC'

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


def _int_env(name: str, default: int) -> int:
    try:
        return int((os.getenv(name) or str(default)).strip())
    except ValueError:
        return default


def _float_env(name: str, default: float) -> float:
    try:
        return float((os.getenv(name) or str(default)).strip())
    except ValueError:
        return default


# Worker cap for synthesis / evaluation fan-out and torch intra-op threads
MAGSHIELD_THREADS = max(1, _int_env("MAGSHIELD_THREADS", os.cpu_count() or 1))

MAGSHIELD_SAMPLE_RATE = _float_env("MAGSHIELD_SAMPLE_RATE", 100.0)
MAGSHIELD_DEFAULT_SEED = _int_env("MAGSHIELD_DEFAULT_SEED", 0)
MAGSHIELD_DATA_DIR = Path(os.getenv("MAGSHIELD_DATA_DIR", str(BASE_DIR / "data")))
MAGSHIELD_SKELETON = Path(os.getenv("MAGSHIELD_SKELETON", str(BASE_DIR / "default_skeleton.json")))

MAGSHIELD_LOG_LEVEL = (os.getenv("MAGSHIELD_LOG_LEVEL") or "INFO").strip().upper()

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "plain": {"format": "%(asctime)s %(levelname)s %(name)s: %(message)s"},
    },
    "handlers": {
        "console": {"class": "logging.StreamHandler", "formatter": "plain"},
    },
    "loggers": {
        "shield": {"handlers": ["console"], "level": MAGSHIELD_LOG_LEVEL, "propagate": False},
    },
}
