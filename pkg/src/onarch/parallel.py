"""Thread-count control with results that do not depend on the thread count.

Work is split into chunks whose boundaries depend only on the problem size;
chunks may run concurrently, but their partial results are combined in chunk
order, so sums are bit-identical at any thread count. BLAS is kept
single-threaded inside :func:`threads`, because a multithreaded matrix
product may change its own summation order with the number of threads.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from functools import reduce

import numpy as np
from threadpoolctl import threadpool_limits

_workers = 1


def get_threads() -> int:
    """Number of worker threads used by :func:`ordered_map`."""
    return _workers


def set_threads(n: int | None) -> int:
    """Set the worker count (``None``: hardware parallelism); returns the previous value."""
    global _workers
    previous = _workers
    n = (os.cpu_count() or 1) if n is None else int(n)
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _workers = n
    return previous


@contextmanager
def threads(n: int | None):
    """Use ``n`` worker threads and single-threaded BLAS inside the block."""
    previous = set_threads(n)
    try:
        with threadpool_limits(limits=1):
            yield
    finally:
        set_threads(previous)


def ordered_map(fn, items) -> list:
    """``[fn(x) for x in items]``, evaluated by up to :func:`get_threads` threads."""
    items = list(items)
    if _workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(_workers, len(items))) as pool:
        return list(pool.map(fn, items))


def ordered_sum(parts):
    """Sum of ``parts`` (arrays or tuples of arrays) in list order."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to sum")
    if isinstance(parts[0], tuple):
        return tuple(reduce(np.add, column) for column in zip(*parts))
    return reduce(np.add, parts)
