from __future__ import annotations

import logging
from typing import Any, Callable, Sequence, TypeVar

from joblib import Parallel, delayed

from app.errors import ConfigError

logger = logging.getLogger(__name__)

T = TypeVar("T")


def run_tasks(fn: Callable[..., T], arg_tuples: Sequence[tuple[Any, ...]], jobs: int = 1) -> list[T]:
    """Call ``fn(*args)`` for every tuple; results come back in input order.

    ``jobs=1`` stays in-process so logs and tracebacks are direct.
    """
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")
    if jobs == 1 or len(arg_tuples) <= 1:
        return [fn(*args) for args in arg_tuples]
    logger.debug("Dispatching tasks", extra={"count": len(arg_tuples), "jobs": jobs})
    return list(Parallel(n_jobs=jobs)(delayed(fn)(*args) for args in arg_tuples))
