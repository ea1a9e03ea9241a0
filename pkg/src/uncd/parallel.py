"""Thread-count control for the BLAS backend.

Kernels parallelise only through BLAS. ``deterministic()`` pins it to a single
thread, which makes every kernel bit-reproducible for a given input.
"""
from __future__ import annotations

import contextlib
import os

from threadpoolctl import threadpool_limits

THREADS_ENV = "UNCD_THREADS"


def configured_threads() -> int | None:
    value = os.environ.get(THREADS_ENV)
    if not value:
        return None
    n = int(value)
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {value!r}")
    return n


@contextlib.contextmanager
def deterministic():
    with threadpool_limits(limits=1):
        yield


@contextlib.contextmanager
def threads(n: int | None = None, *, single: bool = False):
    """Limit BLAS threads to ``n`` (default: ``$UNCD_THREADS``, else unlimited)."""
    if single:
        n = 1
    elif n is None:
        n = configured_threads()
    if n is None:
        yield
        return
    with threadpool_limits(limits=n):
        yield
