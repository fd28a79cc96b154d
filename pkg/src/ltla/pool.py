"""Shared worker-pool cap. Results are collected in submission order, so
outputs are identical for any thread count; --threads 1 additionally
serializes execution."""

from concurrent.futures import ThreadPoolExecutor

_threads = 1


def set_threads(n: int):
    global _threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = n


def current_threads() -> int:
    return _threads


def map_ordered(fn, items):
    items = list(items)
    if _threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=_threads) as ex:
        return list(ex.map(fn, items))
