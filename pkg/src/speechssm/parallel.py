"""Deterministic parallel mapping over independent work items."""

from concurrent.futures import ThreadPoolExecutor


def ordered_map(fn, items, workers=1):
    """Map fn over items, preserving order; workers=1 is a plain loop.

    Results are aggregated in input order regardless of completion order,
    so outputs are independent of the parallel schedule.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
