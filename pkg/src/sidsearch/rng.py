"""Seeded, splittable randomness.

Every random draw in the package comes from a Philox generator keyed by a
path of integers or strings, e.g. ``generator(seed, "dropout", step, 1)``.
There is no global RNG state.
"""
from __future__ import annotations

import zlib

import numpy as np


def _as_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    return zlib.crc32(str(part).encode())


def generator(*path) -> np.random.Generator:
    """Counter-based generator keyed by ``path``; identical paths give identical streams."""
    ss = np.random.SeedSequence([_as_int(p) for p in path])
    return np.random.Generator(np.random.Philox(ss))


def subseed(*path) -> int:
    """Derive a 63-bit integer seed from ``path``."""
    ss = np.random.SeedSequence([_as_int(p) for p in path])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
