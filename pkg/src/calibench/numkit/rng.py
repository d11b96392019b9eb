"""Seed handling.

All randomness starts from one integer seed. Sub-seeds are derived with
SplitMix64 (64-bit state, Steele et al. constants); each derived seed then feeds a
numpy ``Generator`` for bulk sampling.
"""
from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a SplitMix64 state once; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def derive_seed(seed: int, *path) -> int:
    """Deterministic 64-bit sub-seed for ``seed`` along a key path.

    String keys are folded in byte by byte so that e.g. ``derive_seed(0, "c1")``
    and ``derive_seed(0, "c2")`` differ.
    """
    state = seed & _MASK
    state, out = splitmix64(state)
    for key in path:
        if isinstance(key, str):
            for byte in key.encode():
                state, out = splitmix64(state ^ byte)
        else:
            state, out = splitmix64(state ^ (int(key) & _MASK))
    return out


def generator(seed: int, *path) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *path)))
