"""Deterministic RNG derivation.

All randomness in the package flows from a single 64-bit root seed.  Streams
are split with ``numpy.random.SeedSequence`` spawn keys so that independent
components (scene generation, training, per-sequence sampling, ...) draw from
non-overlapping, reproducible streams.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    raise TypeError(f"seed key must be str or int, got {type(key)!r}")


def seed_sequence(root: int, *keys) -> np.random.SeedSequence:
    """SeedSequence for stream ``keys`` under the root seed."""
    return np.random.SeedSequence(entropy=int(root), spawn_key=tuple(_key_to_int(k) for k in keys))


def rng_for(root: int, *keys) -> np.random.Generator:
    """Generator for stream ``keys`` under the root seed."""
    return np.random.default_rng(seed_sequence(root, *keys))
