"""
Structured logging configuration
One stderr handler under the "hdg_fwi" namespace; stdout is reserved for
command results. Solver stages report key=value fields so runs can be grepped.
"""

import logging
import os
import sys
from datetime import datetime
from typing import Any, Dict

ROOT = "hdg_fwi"

# Seconds after which a stage is reported at INFO / WARNING instead of DEBUG
NOTICE_AFTER = 2.0
SLOW_AFTER = 5.0

# LogRecord attributes that must not be overwritten through `extra`
_RESERVED = set(vars(logging.LogRecord("", 0, "", 0, "", None, None))) | {"message", "asctime"}


class ColoredFormatter(logging.Formatter):
    """Level names in ANSI colour when writing to a terminal"""

    COLORS = {
        logging.DEBUG: '\033[36m',
        logging.INFO: '\033[32m',
        logging.WARNING: '\033[33m',
        logging.ERROR: '\033[31m',
        logging.CRITICAL: '\033[35m',
    }
    RESET = '\033[0m'

    def __init__(self, fmt: str, datefmt: str, use_color: bool):
        super().__init__(fmt=fmt, datefmt=datefmt)
        self.use_color = use_color

    def formatMessage(self, record):
        text = super().formatMessage(record)
        color = self.COLORS.get(record.levelno)
        if not self.use_color or color is None:
            return text
        return text.replace(record.levelname, f"{color}{record.levelname}{self.RESET}", 1)


def setup_logging(level: str = "INFO") -> logging.Logger:
    numeric = logging.getLevelName(level.upper())
    if not isinstance(numeric, int):
        numeric = logging.INFO

    root = logging.getLogger(ROOT)
    root.setLevel(numeric)
    root.propagate = False
    for handler in list(root.handlers):
        root.removeHandler(handler)

    handler = logging.StreamHandler(sys.stderr)
    handler.setLevel(numeric)
    handler.setFormatter(ColoredFormatter(
        fmt='%(asctime)s | %(levelname)-8s | %(name)s | %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S',
        use_color=sys.stderr.isatty(),
    ))
    root.addHandler(handler)
    return root


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(f"{ROOT}.{name}")


def _fields(values: Dict[str, Any]) -> Dict[str, Any]:
    return {(f"field_{key}" if key in _RESERVED else key): value for key, value in values.items()}


def log_performance(stage: str, duration: float, **fields):
    """Stage timing with key=value fields; long stages are promoted to INFO or WARNING"""
    perf = get_logger("performance")
    summary = " ".join(f"{key}={value}" for key, value in fields.items())
    extra = _fields({"stage": stage, "duration_seconds": round(duration, 4), **fields})

    if duration > SLOW_AFTER:
        perf.warning(f"Slow stage: {stage} took {duration:.2f}s {summary}", extra=extra)
    elif duration > NOTICE_AFTER:
        perf.info(f"{stage} took {duration:.2f}s {summary}", extra=extra)
    else:
        perf.debug(f"{stage} took {duration:.3f}s {summary}", extra=extra)


def log_error(operation: str, error: Exception, **fields):
    """Errors with their structured details (HDGError.details is merged in)"""
    details = dict(getattr(error, "details", {}) or {})
    details.update(fields)
    extra = _fields({
        "operation": operation,
        "error_type": type(error).__name__,
        "error_message": str(error),
        "timestamp": datetime.now().isoformat(),
        **details,
    })
    summary = " ".join(f"{key}={value}" for key, value in details.items())
    get_logger("errors").error(f"{operation} failed: {type(error).__name__}: {error} {summary}".rstrip(), extra=extra)


# Global logger instance
logger = setup_logging(os.getenv("LOG_LEVEL", "INFO"))
