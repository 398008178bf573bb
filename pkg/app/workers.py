"""
Worker pool helpers
Per-cell and per-source work is independent; results always come back in input order
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

from .config import settings

T = TypeVar("T")
R = TypeVar("R")


def map_ordered(func: Callable[[T], R], items: Iterable[T], max_workers: Optional[int] = None) -> List[R]:
    """Apply func to every item, fanning out over threads when more than one worker is configured"""
    items = list(items)
    workers = settings.MAX_WORKERS if max_workers is None else max_workers

    if workers <= 1 or len(items) < 2:
        return [func(item) for item in items]

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))
