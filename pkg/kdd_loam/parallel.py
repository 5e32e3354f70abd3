from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

T = TypeVar("T")

_max_workers: int = 1


def set_max_workers(threads: int) -> None:
    global _max_workers
    if threads < 1:
        raise ValueError("Thread count must be at least 1")
    _max_workers = threads


def max_workers() -> int:
    return _max_workers


def map_blocks(
    fn: Callable[[int, int], T], n_items: int, block_size: int = 1024
) -> list[T]:
    """Run fn(start, stop) over consecutive blocks, results in block order."""
    bounds = [
        (start, min(start + block_size, n_items))
        for start in range(0, n_items, block_size)
    ]

    if _max_workers == 1 or len(bounds) <= 1:
        return [fn(start, stop) for start, stop in bounds]

    with ThreadPoolExecutor(max_workers=_max_workers) as executor:
        return list(executor.map(lambda b: fn(*b), bounds))
