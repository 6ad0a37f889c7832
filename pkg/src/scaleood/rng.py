"""Reproducible random streams.

Every stream is a Philox-4x64 counter-based generator keyed by
SeedSequence([seed, shard]). Work is split into fixed-size shards so the
output does not depend on how many threads draw them.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, TypeVar

import numpy as np

T = TypeVar("T")

SHARD_ROWS = 256


def philox_stream(seed: int, shard: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(shard)])))


def shard_sizes(n_rows: int, shard_rows: int = SHARD_ROWS) -> List[int]:
    full, rest = divmod(int(n_rows), shard_rows)
    return [shard_rows] * full + ([rest] if rest else [])


def run_sharded(
    n_rows: int,
    seed: int,
    draw: Callable[[np.random.Generator, int], T],
    threads: int = 1,
    shard_rows: int = SHARD_ROWS,
) -> List[T]:
    """Call draw(rng, rows) once per shard; results come back in shard order."""
    sizes = shard_sizes(n_rows, shard_rows)

    def _one(i: int) -> T:
        return draw(philox_stream(seed, i), sizes[i])

    if threads <= 1:
        return [_one(i) for i in range(len(sizes))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_one, range(len(sizes))))
