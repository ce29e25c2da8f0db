"""Order-preserving task map, serial or over worker processes."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor


def map_ordered(fn, tasks, workers: int = 1) -> list:
    """``[fn(t) for t in tasks]``, optionally spread over ``workers`` processes.

    Results come back in task order, so output never depends on ``workers``.
    """
    tasks = list(tasks)
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
