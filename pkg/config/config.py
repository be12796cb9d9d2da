import os

from dotenv import load_dotenv

load_dotenv()

ENV_PREFIX = "IMPUTAD_"


def _env(name: str, default=None):
    return os.getenv(ENV_PREFIX + name, default)


def _env_bool(name: str, default: bool) -> bool:
    value = _env(name)
    if value is None:
        return default
    return value.strip().lower() in ("1", "true", "yes", "on")


# Logging
LOG_LEVEL = _env("LOG_LEVEL", "INFO")
LOG_DIR = _env("LOG_DIR", "logs")
JSON_LOGS = _env_bool("JSON_LOGS", True)
LOG_TO_FILE = _env_bool("LOG_TO_FILE", True)

# Runtime
DEVICE = _env("DEVICE", "cpu")
WORKERS = int(_env("WORKERS", 1))
TIMEZONE = _env("TIMEZONE", "UTC")

# HTTP API
CHECKPOINT = _env("CHECKPOINT")
API_HOST = _env("API_HOST", "0.0.0.0")
API_PORT = int(_env("API_PORT", 8000))
API_SEED = int(_env("API_SEED", 0))

if WORKERS < 1:
    raise EnvironmentError(f"{ENV_PREFIX}WORKERS must be >= 1, got {WORKERS}")
