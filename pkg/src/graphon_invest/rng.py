"""Counter-addressed random streams.

Every stream is keyed by a tuple of integers (seed, tag, index...), so draws
never depend on the order in which streams are requested or on how work is
split across threads.
"""
from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def _tag(tag: str | int) -> int:
    if isinstance(tag, str):
        return zlib.crc32(tag.encode())
    return int(tag)


def stream(seed: int, *key: str | int) -> np.random.Generator:
    """Independent Philox generator addressed by ``(seed, *key)``."""
    words = [int(seed) & MASK64] + [_tag(k) & MASK64 for k in key]
    ss = np.random.SeedSequence(words)
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *key: str | int) -> int:
    """64-bit child seed for the cell ``key`` of a run seeded with ``seed``."""
    words = [int(seed) & MASK64] + [_tag(k) & MASK64 for k in key]
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0])
