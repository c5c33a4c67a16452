"""Seeded random streams.

All randomness goes through numpy's Philox-4x64 bit generator, a counter-based
PRNG (Salmon et al., "Parallel random numbers: as easy as 1, 2, 3") whose
output for a given key is fixed across platforms. Independent streams are
derived by hashing a string label into the key, so e.g. the parameter stream
and the data-shuffling stream never interact.
"""

from __future__ import annotations

import hashlib

import numpy as np


def philox(seed: int, label: str = "") -> np.random.Generator:
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode()).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside +-bound*std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(dtype)
