"""Worker-count control for the numba data-parallel kernels.

Kernels only parallelize over independent pixels/hypotheses and never use
cross-thread reductions, so results are identical for any worker count.
"""
from __future__ import annotations

import contextlib

import numba


def max_workers() -> int:
    return numba.config.NUMBA_NUM_THREADS


def set_workers(n: int | None) -> int:
    """Set the kernel thread count; ``None`` means all available. Returns the count used."""
    limit = max_workers()
    if n is None:
        n = limit
    if n < 1:
        raise ValueError("worker count must be >= 1")
    if n > limit:
        raise ValueError(
            f"{n} workers requested but numba was started with {limit}; set NUMBA_NUM_THREADS"
        )
    numba.set_num_threads(n)
    return n


@contextlib.contextmanager
def workers(n: int | None):
    old = numba.get_num_threads()
    set_workers(n)
    try:
        yield
    finally:
        numba.set_num_threads(old)
