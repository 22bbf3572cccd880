"""Seeded counter-based random streams.

All randomness (weight init, bag synthesis, shuffling, Monte Carlo noise)
comes from Philox generators keyed by ``(seed, stream)``, so consuming one
stream never shifts another.
"""
from __future__ import annotations

import numpy as np

STREAMS = {
    "init": 1,
    "bags": 2,
    "shuffle": 3,
    "mc": 4,
    "eval": 5,
}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name`` (optionally sub-keyed, e.g. by epoch)."""
    key = (STREAMS[name],) + tuple(int(e) for e in extra)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
