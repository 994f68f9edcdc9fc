"""Utils module - Shared utilities and constants."""

from .constants import *
from .logger import get_logger, add_file_handler, remove_file_handler

__all__ = ["get_logger", "add_file_handler", "remove_file_handler"]
