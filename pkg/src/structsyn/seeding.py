"""Seed derivation helpers.

Every random stream in the package is derived from one master seed with a
splitmix64 step, so per-record and per-stage streams are independent but
reproducible.
"""

import numpy as np
import torch

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, *keys: int) -> int:
    """Fold ``keys`` into ``master`` and return a 63-bit seed.

    ``derive_seed(s, i)`` is the seed for record ``i`` of a dataset built
    from master seed ``s``; further keys select sub-streams.
    """
    z = splitmix64(int(master) & _MASK64)
    for k in keys:
        z = splitmix64(z ^ (int(k) & _MASK64))
    return z >> 1


def numpy_rng(master: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))


def torch_generator(master: int, *keys: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(master, *keys))
    return g
