"""Batch execution backends for the data-parallel stages (FES and the pilot stage).

A backend takes a function over a contiguous query range and a batch size,
runs the ranges, and returns the per-range results in range order, so the
output never depends on scheduling.  The reference backend is a thread pool;
the compiled kernels release the GIL.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

__all__ = ["ThreadPoolBackend", "default_threads"]

THREADS_ENV = "PILOTANN_THREADS"


def default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


class ThreadPoolBackend:
    def __init__(self, threads: int | None = None, chunk: int = 64):
        self.threads = default_threads() if threads is None else max(1, threads)
        self.chunk = chunk
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def ranges(self, m: int):
        step = max(1, min(self.chunk, -(-m // self.threads)))
        return [(s, min(s + step, m)) for s in range(0, m, step)]

    def map(self, fn, m: int) -> list:
        """``fn(start, stop)`` for each chunk of ``range(m)``, results in order."""
        rs = self.ranges(m)
        if self._pool is None or len(rs) == 1:
            return [fn(a, b) for a, b in rs]
        return list(self._pool.map(lambda ab: fn(*ab), rs))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
