"""Deterministic keyed random streams.

Every stochastic quantity in the package is drawn from a counter-based
generator (Philox) keyed by ``(master_seed, *tokens)``. A stream depends only
on its key, never on call order, worker count or platform, which is what makes
wafer builds, noisy writes and measurement noise reproducible and mergeable.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(master_seed: int, *tokens) -> int:
    """128-bit Philox key derived from the seed and an arbitrary token path."""
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(master_seed)).encode())
    for t in tokens:
        h.update(b"\x1f")
        h.update(str(t).encode())
    return int.from_bytes(h.digest(), "little")


def stream(master_seed: int, *tokens) -> np.random.Generator:
    """Independent generator for the given token path."""
    return np.random.Generator(np.random.Philox(key=stream_key(master_seed, *tokens)))
