"""
Process-wide runtime settings.

The worker count comes from the ``CONVNOVA_WORKERS`` environment variable.
One worker is the deterministic mode used by the tests and the benchmark.
"""

import logging
import os
import sys
from contextlib import contextmanager
from typing import Iterator, Optional

from src.errors import ConfigError

WORKERS_ENV = "CONVNOVA_WORKERS"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

_worker_override: Optional[int] = None


def get_workers() -> int:
    """
    Number of worker threads used for read-only evaluation.

    Returns:
        The override set by ``single_worker()`` if active, else the value of
        ``CONVNOVA_WORKERS`` (default 1)
    """
    if _worker_override is not None:
        return _worker_override
    raw = os.environ.get(WORKERS_ENV, "1").strip()
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}")
    if workers < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1, got {workers}")
    return workers


@contextmanager
def single_worker() -> Iterator[None]:
    """Pin the process to one worker for the duration of the block."""
    global _worker_override
    previous = _worker_override
    _worker_override = 1
    try:
        yield
    finally:
        _worker_override = previous


def configure_logging(verbosity: int = 0) -> None:
    """
    Install a single stream handler on the root logger.

    Args:
        verbosity: 0 for INFO, 1 or more for DEBUG
    """
    level = logging.DEBUG if verbosity > 0 else logging.INFO
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)
