"""Seeded random streams.

Every stream is a numpy ``Generator`` over the PCG64 bit generator, seeded
by ``SeedSequence([seed, *keys])``. PCG64 and SeedSequence are fully
specified and produce the same bits on every platform, so runs with the same
seed reproduce exactly on the same numpy release.
"""

from __future__ import annotations

import numpy as np

# Stream keys; keep distinct so independent consumers never share bits.
WORLD = 1
TRIAL = 2
SPLIT = 3
INIT = 4
SHUFFLE = 5
EVAL = 6


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))
