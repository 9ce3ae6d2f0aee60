"""Seed plumbing.

Every stochastic routine takes an explicit integer seed and builds a
``numpy.random.Generator`` backed by PCG64. Child seeds are derived by folding
``(seed, *keys)`` through the SplitMix64 finalizer, so independent streams
(crop anchor, jitter, candidate k of batch b, ...) never depend on how many
draws another stream consumed.
"""

from __future__ import annotations

import numpy as np

_MASK = 0xFFFFFFFFFFFFFFFF


def _splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Return a 63-bit child seed determined by ``seed`` and ``keys``."""
    h = _splitmix64(int(seed) & _MASK)
    for k in keys:
        h = _splitmix64(h ^ _splitmix64((int(k) & _MASK) ^ 0x5851F42D4C957F2D))
    return h >> 1


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    if keys:
        seed = derive_seed(seed, *keys)
    return np.random.Generator(np.random.PCG64(int(seed) & _MASK))
