"""Deterministic random substreams.

Every random quantity is derived from a root seed plus a tuple of integer
keys (tree index, iteration, replicate, ...), so results do not depend on
how work is scheduled across workers.
"""

from __future__ import annotations

import numpy as np


def _sequence(seed: int, keys: tuple[int, ...]) -> np.random.SeedSequence:
    if seed is None or int(seed) < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed!r}")
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``."""
    return np.random.Generator(np.random.PCG64(_sequence(seed, keys)))


def substream_seed(seed: int, *keys: int) -> int:
    """A 63-bit integer seed for ``(seed, *keys)``, usable as a new root seed."""
    state = _sequence(seed, keys).generate_state(1, np.uint64)[0]
    return int(state >> np.uint64(1))


# stream tags, kept distinct so that e.g. the bias-correction refits never
# reuse the fitting iterations' forests
STREAM_MERF = 1
STREAM_BIAS = 2
STREAM_REB = 3
STREAM_SIM = 4
