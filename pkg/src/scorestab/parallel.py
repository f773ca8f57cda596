"""Order-preserving map over a process pool."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], items: Iterable[T], jobs: int = 1) -> list[R]:
    """``[fn(x) for x in items]``, spread over ``jobs`` processes when jobs > 1.

    Every item must carry its own seed; results come back in input order, so
    the output does not depend on ``jobs``.
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


__all__ = ["parallel_map"]
