"""Deterministic random streams.

Every stochastic step (weight init, episode sampling, augmentation, synthetic
data) draws from its own counter-based substream derived from the run seed
plus a purpose tag, so adding draws to one step never shifts another.
"""
from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["substream"]


def substream(seed: int, *tags) -> np.random.Generator:
    """Generator keyed by the hash of (seed, *tags).

    Tags may be strings or integers; they are serialized unambiguously
    (length-prefixed) before hashing so ("ab", 1) and ("a", "b1") differ.
    """
    h = hashlib.sha256()
    h.update(int(seed).to_bytes(8, "little", signed=True))
    for tag in tags:
        part = str(tag).encode("utf-8")
        kind = b"i" if isinstance(tag, int) and not isinstance(tag, bool) else b"s"
        h.update(kind + len(part).to_bytes(4, "little") + part)
    key = np.frombuffer(h.digest()[:16], dtype="<u8")
    return np.random.Generator(np.random.Philox(key=key))
