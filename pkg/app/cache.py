"""
In-memory cache for immutable reference objects
Bases and quadrature rules are built once per (order, dim) or
(degree, simplex dim) and shared by every cell and every thread
"""

import threading
from functools import wraps
from typing import Any, Callable, Dict, Hashable, Tuple


class ReferenceCache:
    """Keyed store with hit statistics; entries never expire"""

    def __init__(self, name: str):
        self.name = name
        self._entries: Dict[Hashable, Any] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get_or_build(self, key: Hashable, build: Callable[[], Any]) -> Any:
        with self._lock:
            if key in self._entries:
                self.hits += 1
                return self._entries[key]
            self.misses += 1
        value = build()
        with self._lock:
            # Concurrent builders of the same key all get the first stored object
            return self._entries.setdefault(key, value)

    def __len__(self) -> int:
        return len(self._entries)

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()
            self.hits = self.misses = 0

    def get_stats(self) -> Dict[str, Any]:
        return {"name": self.name, "entries": len(self), "hits": self.hits, "misses": self.misses}


def _key(func: Callable, args: Tuple, kwargs: Dict) -> Hashable:
    return (func.__qualname__, args, tuple(sorted(kwargs.items())))


def cached(cache_instance: ReferenceCache):
    """Memoize a builder whose arguments are small hashable values"""

    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            return cache_instance.get_or_build(_key(func, args, kwargs), lambda: func(*args, **kwargs))

        wrapper.cache_clear = cache_instance.clear
        wrapper.cache_info = cache_instance.get_stats
        return wrapper
    return decorator


basis_cache = ReferenceCache("basis")
quadrature_cache = ReferenceCache("quadrature")
