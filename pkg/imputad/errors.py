class ImputadError(Exception):
    """
    Base class for every error raised by the package.

    Each subclass carries a machine-readable ``category`` that the CLI writes to
    stderr and the HTTP API returns in the response body, plus the process exit
    code used by ``runner.py``.
    """
    category = "internal"
    exit_code = 1


class ConfigError(ImputadError):
    category = "config"
    exit_code = 2


class DataError(ImputadError):
    category = "data"
    exit_code = 3


class CheckpointError(ImputadError):
    category = "checkpoint"
    exit_code = 4


class TrainingError(ImputadError):
    category = "training"
    exit_code = 5


class InferenceError(ImputadError):
    category = "inference"
    exit_code = 6


class MetricsError(ImputadError):
    category = "metrics"
    exit_code = 7
