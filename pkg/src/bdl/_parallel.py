"""Deterministic chunked mapping with an optional thread pool.

The worker count comes from the ``BDL_THREADS`` environment variable
(default 1). Results are always returned in chunk order, so output never
depends on how many workers ran.
"""

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count() -> int:
    raw = os.environ.get("BDL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def chunk_ranges(total: int, chunk: int):
    chunk = max(1, int(chunk))
    return [(s, min(s + chunk, total)) for s in range(0, total, chunk)]


def map_ordered(func, items):
    items = list(items)
    n = worker_count()
    if n == 1 or len(items) <= 1:
        return [func(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(func, items))
