"""Deterministic per-task seeding and an order-preserving parallel map."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")

_THREADS = 1


def set_threads(n: int) -> None:
    """Cap worker counts for every parallel map in the process."""
    global _THREADS
    _THREADS = max(1, int(n))


def get_threads() -> int:
    return _THREADS


def task_rng(master_seed: int, *index: int) -> np.random.Generator:
    """Independent stream for task ``index`` under ``master_seed``.

    The stream depends only on (master_seed, index), never on scheduling.
    """
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(i) for i in index)))


def ordered_map(fn: Callable[..., T], args: Sequence, threads: int | None = None) -> list[T]:
    """``[fn(*a) for a in args]``, optionally on a process pool, in index order."""
    threads = get_threads() if threads is None else threads
    threads = min(threads, os.cpu_count() or 1, max(len(args), 1))
    if threads <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, *a) for a in args]
        return [f.result() for f in futures]
