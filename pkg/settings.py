"""
Process-level settings read from the environment.

Values come from the shell or a local .env file. Command-level hyperparameters
live in the pydantic models (see models.py); this module only covers the knobs
that shape how a process runs: logging verbosity and thread caps.
"""

import os
import logging
from contextlib import contextmanager
from typing import Optional

from dotenv import load_dotenv
from threadpoolctl import threadpool_limits

logger = logging.getLogger(__name__)

load_dotenv()

TRUTHY = ('true', '1', 'yes', 'on')


def env_flag(name: str, default: bool = False) -> bool:
    """Read a boolean flag such as DEBUG_MODE=true."""
    raw = os.getenv(name)
    if raw is None:
        return default
    return raw.strip().lower() in TRUTHY


def env_int(name: str, default: int, minimum: int = 1) -> int:
    """Read an integer setting, falling back to the default on bad input.

    Args:
        name: Environment variable name
        default: Value used when the variable is unset or invalid
        minimum: Smallest accepted value

    Returns:
        The parsed integer or the default
    """
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        value = int(raw)
    except ValueError:
        logger.warning(f"Invalid {name}={raw!r}, using default {default}")
        return default
    if value < minimum:
        logger.warning(f"{name}={value} is below {minimum}, using default {default}")
        return default
    return value


def debug_mode() -> bool:
    return env_flag('DEBUG_MODE')


def verbose() -> bool:
    return env_flag('VERBOSE')


def log_file() -> Optional[str]:
    path = os.getenv('MEMSPM_LOG_FILE', '').strip()
    return path or None


def thread_limit() -> int:
    """Cap on internal parallelism (MEMSPM_THREADS, default 1)."""
    return env_int('MEMSPM_THREADS', 1)


@contextmanager
def limited_threads(limit: Optional[int] = None):
    """Run a block with BLAS/OpenMP pools capped to the configured thread count."""
    limit = thread_limit() if limit is None else limit
    logger.debug(f"Capping native thread pools at {limit}")
    with threadpool_limits(limits=limit):
        yield limit
