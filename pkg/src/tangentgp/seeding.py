"""Deterministic derivation of named random streams from one experiment seed.

Every stochastic component pulls its generator through :func:`substream`
with a fixed role name, so adding or reordering components never shifts
the draws seen by the others.
"""

import hashlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return an independent generator for a named role under ``seed``."""
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))
