import json
import logging
import os
import sys
import traceback
from datetime import datetime
from logging.handlers import RotatingFileHandler

# Attributes every LogRecord carries; anything else came in through ``extra=``.
_RESERVED = set(vars(logging.LogRecord("", 0, "", 0, "", (), None))) | {"message", "asctime"}

TEXT_FORMAT = '%(asctime)s [%(levelname)s] %(name)s - %(message)s (%(filename)s:%(lineno)d)'


class JSONFormatter(logging.Formatter):
    """
    One JSON object per record.

    Besides the standard context (time, level, logger, source location,
    process and thread), every field passed through ``extra=`` is copied in,
    so ``event_type``, epoch numbers, losses and paths can be filtered on.
    ``static_fields`` are added to every record.
    """
    def __init__(self, static_fields=None):
        super().__init__()
        self.static_fields = dict(static_fields or {})

    def format(self, record):
        payload = {
            'timestamp': datetime.fromtimestamp(record.created).isoformat(),
            'level': record.levelname,
            'name': record.name,
            'message': record.getMessage(),
            'module': record.module,
            'function': record.funcName,
            'line': record.lineno,
            'process_id': record.process,
            'thread_id': record.thread,
        }
        if record.exc_info:
            exc_type, exc_value, exc_tb = record.exc_info
            payload['exception'] = {
                'type': exc_type.__name__,
                'message': str(exc_value),
                'traceback': traceback.format_exception(exc_type, exc_value, exc_tb),
            }
        payload.update(
            (key, value) for key, value in vars(record).items()
            if key not in _RESERVED and not key.startswith('_')
        )
        payload.update(self.static_fields)
        return json.dumps(payload, default=_jsonable)


def _jsonable(value):
    # numpy scalars and arrays
    if hasattr(value, 'tolist'):
        return value.tolist()
    return str(value)


class TextFormatter(logging.Formatter):
    """Plain text format with the event type appended when present."""
    def __init__(self):
        super().__init__(TEXT_FORMAT)

    def format(self, record):
        text = super().format(record)
        event_type = getattr(record, 'event_type', None)
        return f"{text} [{event_type}]" if event_type else text


def _resolve_level(level):
    if isinstance(level, int):
        return level
    resolved = logging.getLevelName(str(level).upper())
    return resolved if isinstance(resolved, int) else logging.INFO


def _rotating_handler(path, level, formatter, max_bytes, backup_count):
    handler = RotatingFileHandler(path, maxBytes=max_bytes, backupCount=backup_count)
    handler.setLevel(level)
    handler.setFormatter(formatter)
    return handler


def setup_logging(
    log_level=logging.INFO,
    log_to_console=True,
    log_to_file=True,
    log_dir='logs',
    app_name='imputad',
    json_logs=True,
    max_bytes=10485760,  # 10MB
    backup_count=5
):
    """
    Configure the root logger for an entry point (CLI or API server).

    Replaces any handlers already installed. Console records go to stderr;
    stdout carries command results only. With ``log_to_file`` the records
    also go to ``<log_dir>/<app_name>.log`` and, from ERROR up, to
    ``<app_name>_error.log``, both rotated by size.

    Args:
        log_level: Minimum level, as a number or a name such as "DEBUG";
            unknown names fall back to INFO
        log_to_console: Whether to log to stderr
        log_to_file: Whether to write the rotating files
        log_dir: Directory for log files
        app_name: Prefix of the log file names
        json_logs: JSON records instead of plain text
        max_bytes: Size at which a file is rotated
        backup_count: Number of rotated files to keep
    """
    level = _resolve_level(log_level)
    root = logging.getLogger()
    for handler in list(root.handlers):
        handler.close()
        root.removeHandler(handler)
    root.setLevel(level)

    formatter = JSONFormatter() if json_logs else TextFormatter()

    if log_to_console:
        console = logging.StreamHandler(sys.stderr)
        console.setLevel(level)
        console.setFormatter(formatter)
        root.addHandler(console)

    if log_to_file:
        os.makedirs(log_dir, exist_ok=True)
        root.addHandler(_rotating_handler(
            os.path.join(log_dir, f"{app_name}.log"), level, formatter, max_bytes, backup_count))
        root.addHandler(_rotating_handler(
            os.path.join(log_dir, f"{app_name}_error.log"), logging.ERROR, formatter, max_bytes, backup_count))

    root.debug(
        f"Logging initialized for {app_name}",
        extra={'event_type': 'logging_initialized', 'json_logs': json_logs, 'log_dir': log_dir if log_to_file else None}
    )
    return root
