"""Named random streams derived from a single master seed.

Every consumer of randomness pulls from its own stream, so drawing more (or
nothing) on one stream never shifts the values another stream produces. That
is what lets two training modes that differ only in an extra noise draw stay
sample-for-sample aligned on everything else.
"""

from __future__ import annotations

import numpy as np

_STREAM_INDEX = {
    "data": 0,
    "t": 1,
    "eps": 2,
    "xi": 3,
    "init": 4,
    "sample": 5,
    "eval": 6,
}


def stream(master_seed: int, name: str) -> np.random.Generator:
    """The named stream for this master seed. Same (seed, name) -> same stream."""
    if name not in _STREAM_INDEX:
        raise ValueError(f"unknown stream name {name!r}; known: {sorted(_STREAM_INDEX)}")
    ss = np.random.SeedSequence(master_seed, spawn_key=(_STREAM_INDEX[name],))
    return np.random.Generator(np.random.PCG64(ss))


def streams(master_seed: int, names) -> dict:
    return {name: stream(master_seed, name) for name in names}
