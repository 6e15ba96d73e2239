"""Optional thread-pool mapping for per-frame work.

Every unit of work owns its own RNG stream, so results are identical
whether items run serially or across threads.
"""
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_VAR = "PEDFORECAST_THREADS"


def thread_count(default: int = 1) -> int:
    """Worker count from the environment; values below 1 clamp to 1."""
    raw = os.environ.get(ENV_VAR, "")
    if not raw.strip():
        return max(1, default)
    try:
        return max(1, int(raw))
    except ValueError:
        return max(1, default)


def parallel_map(fn: Callable[[T], R], items: Iterable[T],
                 threads: int | None = None) -> list[R]:
    """Map preserving input order; serial when one worker."""
    seq: Sequence[T] = list(items)
    n = thread_count() if threads is None else max(1, threads)
    if n <= 1 or len(seq) <= 1:
        return [fn(item) for item in seq]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, seq))
