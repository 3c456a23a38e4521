"""Deterministic RNG derivation.

Every stochastic component derives its generator from an integer key path
(seed, stage tag, round, device, ...) so that runs are reproducible bit for
bit and components do not perturb each other's draw order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _as_entropy(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if isinstance(key, (int, np.integer)):
        v = int(key)
        # SeedSequence wants non-negative entropy words
        return v if v >= 0 else v & 0xFFFFFFFFFFFFFFFF
    raise TypeError(f"seed key must be int or str, got {type(key).__name__}")


def rng_from(*keys: int | str) -> np.random.Generator:
    """Generator keyed on an arbitrary mixed int/str path."""
    return np.random.default_rng(np.random.SeedSequence([_as_entropy(k) for k in keys]))


def seed_from(*keys: int | str) -> int:
    """Collapse a key path into a single integer seed."""
    seq = np.random.SeedSequence([_as_entropy(k) for k in keys])
    return int(seq.generate_state(1, np.uint64)[0])
