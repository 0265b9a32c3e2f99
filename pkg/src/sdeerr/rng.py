"""Seed derivation for reproducible Monte Carlo.

A master seed is split into sub-seeds by hashing it together with a tuple of
labels (experiment kind, mesh index, ...). Inside a simulation each Brownian
stream gets its own 64-bit key, and the kernels derive per-path keys from it.
"""
from __future__ import annotations

import hashlib

from ._pykernels import mix

MASK64 = (1 << 64) - 1

# stream ids
INCREMENTS = 0
BRIDGE = 1
AUXILIARY = 2


def derive_seed(master: int, *labels) -> int:
    """Deterministic 64-bit sub-seed for ``(master, *labels)``."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master) & MASK64).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(repr(label).encode())
    return int.from_bytes(h.digest(), "little")


def stream_key(seed: int, stream: int = INCREMENTS) -> int:
    """Key of Brownian stream ``stream`` under ``seed``."""
    return mix(mix(int(seed) & MASK64) ^ mix(0x632BE59BD9B4E019 + int(stream)))
