"""Line-delimited JSON telemetry on stderr, verbosity from ``SMASH_LOG``."""

from __future__ import annotations

import json
import logging
import os
import sys

LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

_logger = logging.getLogger("smashnas")


class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {"level": record.levelname.lower(), "event": record.getMessage()}
        payload.update(getattr(record, "fields", {}))
        return json.dumps(payload, sort_keys=True, default=_fallback)


def _fallback(value):
    if hasattr(value, "tolist"):
        return value.tolist()
    return str(value)


def configure(level: str | None = None, stream=None) -> None:
    """(Re)attach the JSON handler; ``level`` defaults to ``$SMASH_LOG`` or ``error``."""
    level = (level or os.environ.get("SMASH_LOG") or "error").lower()
    if level not in LEVELS:
        raise ValueError(f"SMASH_LOG must be one of {sorted(LEVELS)}, got {level!r}")
    for h in list(_logger.handlers):
        _logger.removeHandler(h)
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(_JsonFormatter())
    _logger.addHandler(handler)
    _logger.setLevel(LEVELS[level])
    _logger.propagate = False


def emit(event: str, level: str = "info", **fields) -> None:
    if not _logger.handlers:
        configure()
    _logger.log(LEVELS[level], event, extra={"fields": fields})
