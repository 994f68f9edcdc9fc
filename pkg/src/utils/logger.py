"""Logging configuration for the BGR toolkit."""

import logging
import os
import sys
from pathlib import Path
from typing import Optional, Union

from utils.constants import LOG_LEVEL_ENV

_FORMAT = "[%(asctime)s] %(levelname)s - %(name)s: %(message)s"
_DATEFMT = "%H:%M:%S"


def _env_level() -> int:
    name = os.environ.get(LOG_LEVEL_ENV, "INFO").upper()
    return getattr(logging, name, logging.INFO)


def get_logger(name: str, level: Optional[int] = None) -> logging.Logger:
    """
    Get a configured logger instance.

    Args:
        name: Logger name (usually __name__)
        level: Logging level (default: $BGR_LOG_LEVEL or INFO)

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)
    level = _env_level() if level is None else level

    if not logger.handlers:
        logger.setLevel(level)

        # Console handler
        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setLevel(level)
        console_handler.setFormatter(logging.Formatter(_FORMAT, datefmt=_DATEFMT))
        logger.addHandler(console_handler)
        logger.propagate = False

    return logger


def add_file_handler(path: Union[str, Path]) -> logging.Handler:
    """Mirror every logger created through get_logger into a log file.

    Returns the handler so callers can detach it with remove_file_handler.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setFormatter(logging.Formatter(_FORMAT, datefmt=_DATEFMT))
    for name in list(logging.Logger.manager.loggerDict):
        logger = logging.getLogger(name)
        if logger.handlers and not logger.propagate:
            logger.addHandler(handler)
    return handler


def remove_file_handler(handler: logging.Handler) -> None:
    """Detach a handler previously returned by add_file_handler."""
    for name in list(logging.Logger.manager.loggerDict):
        logger = logging.getLogger(name)
        if handler in logger.handlers:
            logger.removeHandler(handler)
    handler.close()
