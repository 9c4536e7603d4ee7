"""Deterministic thread-pool helpers.

Results are always collected in input order, so any computation built on
``parallel_map`` is bitwise independent of the thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

from .errors import ValidationError

THREADS_ENV = "GRADMERGE_THREADS"

T = TypeVar("T")
R = TypeVar("R")


def resolve_threads(explicit: int | None = None) -> int:
    """Thread count from an explicit value, else the environment, else 1."""
    if explicit is None:
        raw = os.environ.get(THREADS_ENV, "").strip()
        if not raw:
            return 1
        try:
            explicit = int(raw)
        except ValueError:
            raise ValidationError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    if explicit < 1:
        raise ValidationError(f"thread count must be a positive integer, got {explicit}")
    return explicit


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """Map ``fn`` over ``items``, returning results in input order."""
    seq: Sequence[T] = list(items)
    if threads <= 1 or len(seq) <= 1:
        return [fn(item) for item in seq]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, seq))
