"""Deterministic parallel map: results merge in input order, so output
bytes never depend on the worker count."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor


def det_map(fn, items, workers: int = 1) -> list:
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
