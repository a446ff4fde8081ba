"""Deterministic per-sample random streams for parallel Monte Carlo.

Each sample index gets its own block of a counter-based Philox stream, so a
sample's draws depend only on (seed, index).  Results are therefore
bit-identical for any worker count, provided the reduction runs in index
order.
"""

from __future__ import annotations

import numpy as np


def sample_stream(seed: int, index: int) -> np.random.Generator:
    """Generator for sample ``index``: the base Philox stream jumped ``index`` blocks."""
    if index < 0:
        raise ValueError("index must be non-negative")
    return np.random.Generator(np.random.Philox(key=seed).jumped(index))


def index_chunks(n: int, workers: int) -> list[range]:
    """Split range(n) into at most ``workers`` contiguous chunks."""
    workers = max(1, min(int(workers), n)) if n else 1
    bounds = np.linspace(0, n, workers + 1).astype(int)
    return [range(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
