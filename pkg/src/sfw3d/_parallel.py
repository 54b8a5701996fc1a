"""Tiny deterministic worker-pool helper shared by the numeric modules."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def map_ordered(fn: Callable[[T], R], items: Sequence[T], workers: int | None) -> list[R]:
    """Map ``fn`` over ``items``, optionally on a thread pool.

    Results always come back in input order, so downstream reductions sum in
    a fixed order and are reproducible for any worker count.
    """
    items = list(items)
    if workers is not None and workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]
