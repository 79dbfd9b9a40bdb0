"""Ordered fan-out over a process pool.

Results always come back in input order, so anything written from them is
deterministic regardless of the pool size.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

logger = logging.getLogger(__name__)


def map_ordered(fn: Callable[[T], R], items: Iterable[T], jobs: int = 1, chunksize: int = 1) -> list[R]:
    """Apply `fn` to every item, in a pool of `jobs` workers when jobs > 1."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    workers = min(jobs, len(items))
    logger.debug("dispatching %d work items to %d workers", len(items), workers)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=chunksize))
