"""Order-preserving chunked execution.

Every parallel helper here returns results in chunk order, so any reduction
done by the caller runs in the same order regardless of the worker count.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

DEFAULT_CHUNK = 16384


def chunk_bounds(n, chunk=DEFAULT_CHUNK):
    return [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]


def chunked_map(fn, n, workers=1, chunk=DEFAULT_CHUNK):
    """Apply ``fn(lo, hi)`` over fixed-size chunks of ``range(n)``."""
    bounds = chunk_bounds(n, chunk)
    if workers <= 1 or len(bounds) == 1:
        return [fn(lo, hi) for lo, hi in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda b: fn(*b), bounds))


def ordered_sum(parts):
    total = parts[0].copy()
    for p in parts[1:]:
        total += p
    return total
