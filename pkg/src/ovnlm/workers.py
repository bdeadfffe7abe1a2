"""Deterministic block-parallel execution over pixel indices."""

from __future__ import annotations

from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
import os

from ovnlm.config import get_settings

# Pixels per task. Fixed so the partition never depends on the worker count.
BLOCK_SIZE = 256


def resolve_workers(workers: int | None = None) -> int:
    """Return the worker count: explicit value, else OVNLM_THREADS, else cpu count."""
    requested = get_settings().threads if workers is None else workers
    if requested <= 0:
        return os.cpu_count() or 1
    return requested


def map_blocks(
    fn: Callable[[int, int], None],
    n_items: int,
    workers: int | None = None,
) -> None:
    """Call ``fn(start, stop)`` for every contiguous block of ``range(n_items)``.

    ``fn`` must write its results into preallocated per-item slots; nothing is
    reduced here, so output is identical for any number of workers.
    """
    blocks = [(start, min(start + BLOCK_SIZE, n_items)) for start in range(0, n_items, BLOCK_SIZE)]
    count = resolve_workers(workers)
    if count == 1 or len(blocks) <= 1:
        for start, stop in blocks:
            fn(start, stop)
        return

    with ThreadPoolExecutor(max_workers=count) as pool:
        futures = [pool.submit(fn, start, stop) for start, stop in blocks]
        for future in futures:
            future.result()
