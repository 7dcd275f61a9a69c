"""Seeding and small process utilities.

Every random draw in the toolkit flows through `stable_seed`, which hashes an
arbitrary tuple of labels into a 64-bit seed.  Unlike Python's `hash`, the
digest is stable across processes and runs, which is what makes training runs,
corpora and augmentation streams exactly reproducible from a single seed.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
U = TypeVar("U")

THREADS_ENV = "CONFSV_THREADS"


def stable_seed(*parts: object) -> int:
    """Hash labels (ints, floats, strings) into a reproducible 64-bit seed."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def rng_for(*parts: object) -> np.random.Generator:
    """A numpy Generator keyed by the given labels."""
    return np.random.default_rng(stable_seed(*parts))


def worker_count() -> int:
    """Worker cap from CONFSV_THREADS; defaults to 1 (serial)."""
    raw = os.environ.get(THREADS_ENV, "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def parallel_map(fn: Callable[[T], U], items: Sequence[T]) -> list[U]:
    """Order-preserving map over stateless work items.

    Runs serially unless CONFSV_THREADS asks for more workers.  Results do not
    depend on the worker count because each item is processed independently.
    """
    n = worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def check_finite(arr: np.ndarray, what: str = "array") -> np.ndarray:
    from .errors import NumericError

    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr
