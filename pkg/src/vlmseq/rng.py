"""Deterministic, splittable random streams.

Every stochastic decision in the library draws from a Philox counter-based
generator whose 128-bit key is derived by hashing a root seed together with a
purpose string and an integer path. Streams with distinct paths are
independent, and the same (seed, purpose, path) always reproduces the same
stream on any platform.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, purpose: str, *path: int) -> int:
    """128-bit Philox key for a (seed, purpose, path) address."""
    h = hashlib.sha256()
    h.update(purpose.encode("utf-8"))
    h.update(int(seed).to_bytes(16, "little", signed=True))
    for part in path:
        h.update(int(part).to_bytes(16, "little", signed=True))
    return int.from_bytes(h.digest()[:16], "little")


def split_rng(seed: int, purpose: str, *path: int) -> np.random.Generator:
    """Independent generator addressed by (seed, purpose, path)."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, purpose, *path)))
