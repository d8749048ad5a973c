"""Seeded random streams.

Every randomised operation takes a :class:`numpy.random.Generator`. Batch-level
helpers derive one independent stream per sample from ``(seed, tag, index)`` so
results never depend on iteration order or thread count.
"""
from __future__ import annotations

import zlib

import numpy as np


def _tag_key(tag: str | int) -> int:
    if isinstance(tag, int):
        return tag
    return zlib.crc32(tag.encode("utf-8"))


def substream(seed: int, *keys: str | int) -> np.random.Generator:
    """Return a generator keyed by ``seed`` and an arbitrary path of keys."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_tag_key(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit seed from ``rng`` for deriving further substreams."""
    return int(rng.integers(0, 2**63 - 1))
