"""
Shared utilities for the PatchRec lab.

Provides:
- Centralized logging configuration
- The project exception hierarchy
- Validation helpers
- Small JSON / JSONL file helpers
"""

import json
import logging
import os
from pathlib import Path
from typing import Iterable, Iterator, Optional


LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def setup_logger(name: str, log_file: Optional[str] = None, level: Optional[int] = None) -> logging.Logger:
    """
    Set up a logger with console and optional file output.

    Args:
        name: Logger name (usually __name__ of the calling module)
        log_file: Optional log file path. Falls back to PATCHREC_LOG_FILE.
        level: Logging level. Falls back to PATCHREC_LOG_LEVEL, then INFO.

    Returns:
        Configured logger instance
    """
    if level is None:
        level = logging.getLevelName(os.getenv("PATCHREC_LOG_LEVEL", "INFO").upper())
        if not isinstance(level, int):
            level = logging.INFO
    log_file = log_file or os.getenv("PATCHREC_LOG_FILE")

    logger = logging.getLogger(name)
    logger.setLevel(level)

    # Avoid duplicate handlers
    if logger.handlers:
        return logger

    console_handler = logging.StreamHandler()
    console_handler.setLevel(level)
    console_handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
    logger.addHandler(console_handler)

    if log_file:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, mode='a')
        file_handler.setLevel(level)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
        logger.addHandler(file_handler)

    return logger


# ============================================================================
# Exceptions
# ============================================================================

class PatchRecError(Exception):
    """Base class for every error raised by the lab."""
    pass


class ConfigError(PatchRecError):
    """Raised when an experiment config or plan is invalid."""
    pass


# Validators below raise this name, kept from the helper module it grew out of.
ValidationError = ConfigError


class DataError(PatchRecError):
    """Raised for unreadable, inconsistent or empty interaction data."""
    pass


class EmptyHistoryError(DataError):
    """Raised when a user has no interaction before the anchor timestamp."""
    pass


class TokenizerError(PatchRecError):
    pass


class TriePrefixError(PatchRecError):
    """A decoder asked for a prefix that is not a path in the title trie."""
    pass


class LayoutError(PatchRecError):
    pass


class LayoutTooLongError(LayoutError):
    """Raised when a layout needs more positions than the model provides."""

    def __init__(self, positions: int, max_positions: int, label: str = "layout"):
        self.positions = positions
        self.max_positions = max_positions
        self.label = label
        super().__init__(
            f"{label} needs {positions} positions but the model has max_positions={max_positions}"
        )


class ShapeError(PatchRecError):
    pass


class EmptyPoolError(PatchRecError):
    pass


class NoSupervisionError(PatchRecError):
    pass


class NumericError(PatchRecError):
    """NaN or infinity reached a place that must stay finite."""
    pass


class CheckpointCorruptError(PatchRecError):
    pass


class VocabMismatchError(PatchRecError):
    pass


# ============================================================================
# Validation helpers
# ============================================================================

def require_fields(data: dict, required_fields: Iterable[str], context: str) -> bool:
    """
    Validate that a config block carries every required key.

    Raises:
        ValidationError: If a required field is missing or empty
    """
    for field in required_fields:
        if field not in data:
            raise ValidationError(f"{context}: missing required field '{field}'")
        if data[field] is None or data[field] == "":
            raise ValidationError(f"{context}: empty required field '{field}'")
    return True


def require_positive(value: int, name: str, allow_zero: bool = False) -> int:
    """Validate an integer count."""
    if not isinstance(value, int) or isinstance(value, bool):
        raise ValidationError(f"{name} must be an integer, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else ">= 1"
        raise ValidationError(f"{name} must be {bound}, got {value}")
    return value


# ============================================================================
# File helpers
# ============================================================================

def write_json(path: Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_json(path: Path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_jsonl(path: Path, records: Iterable[dict], append: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a" if append else "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
    return path


def read_jsonl(path: Path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)
