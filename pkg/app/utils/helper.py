from typing import Optional, Tuple
import logging
import os
from tenacity import (
    retry,
    retry_if_exception_type,
    stop_after_attempt,
    before_sleep_log,
)


# Minimal root logger config so containers and CLI runs capture logs
_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
logging.basicConfig(
    level=getattr(logging, _LEVEL, logging.INFO),
    format="%(asctime)s %(levelname)s %(message)s",
    handlers=[logging.StreamHandler()],
    force=True,
)


def log(message: str, level: str = "INFO"):
    """Simple logging function used by every module"""
    logger = logging.getLogger("dfconformer")

    if level.upper() == "DEBUG":
        logger.debug(message)
    elif level.upper() == "INFO":
        logger.info(message)
    elif level.upper() == "WARNING":
        logger.warning(message)
    elif level.upper() == "ERROR":
        logger.error(f"🚨 {message}")
    else:
        logger.info(message)


# ---------- Errors ----------

class DimensionError(ValueError):
    """Raised when tensor shapes do not line up; both shapes are reported."""
    def __init__(self, message: str, left: Optional[Tuple[int, ...]] = None, right: Optional[Tuple[int, ...]] = None):
        if left is not None or right is not None:
            message = f"{message}: {tuple(left) if left is not None else None} vs {tuple(right) if right is not None else None}"
        super().__init__(message)
        self.left = left
        self.right = right


class NonFiniteError(FloatingPointError):
    """Raised when NaN/Inf shows up where finite values are required."""


class ConfigError(ValueError):
    """Raised for invalid run configuration; `key` names the offending entry."""
    def __init__(self, key: str, message: str = ""):
        super().__init__(f"Invalid config key '{key}'" + (f": {message}" if message else ""))
        self.key = key


class CheckpointError(ValueError):
    """Raised when a checkpoint manifest/blob pair is malformed or does not match the model."""


class WavFormatError(ValueError):
    """Raised for WAV files that are not mono 16-bit PCM or have broken headers."""


class DumpLimitError(ValueError):
    """Raised when an attention dump would exceed the configured frame limit."""


class SilentDrawError(RuntimeError):
    """Raised when a synthetic speech draw has (near) zero energy and must be redrawn."""


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""
    def __init__(self, step: int, last_checkpoint: Optional[str] = None):
        super().__init__(f"Non-finite loss at step {step}; last good checkpoint: {last_checkpoint}")
        self.step = step
        self.last_checkpoint = last_checkpoint


# ---------- Environment ----------

def env_flag(name: str, default: bool = False) -> bool:
    raw = os.getenv(name)
    if raw is None:
        return default
    return raw.strip().lower() in ("1", "true", "yes", "on")


def reproducible_mode() -> bool:
    """True when DFC_REPRODUCIBLE is set: synchronous data, no wall-clock values in logs."""
    return env_flag("DFC_REPRODUCIBLE")


def dump_limit() -> int:
    return int(os.getenv("DFC_DUMP_LIMIT", "4000"))


# ---------- Tenacity-backed retry for redraw loops ----------

def redraw_retry(exceptions: tuple = (SilentDrawError,), attempts: int = 10):
    """Return a tenacity retry decorator for draws that can come out degenerate.

    The wrapped function is expected to advance its own random state between
    attempts, so retries are deterministic for a given seed.
    """
    return retry(
        reraise=True,
        stop=stop_after_attempt(attempts),
        retry=retry_if_exception_type(exceptions),
        before_sleep=before_sleep_log(logging.getLogger("dfconformer"), logging.WARNING),
    )
