"""Counter-based random streams keyed by (seed, operation tag)."""
from __future__ import annotations

import zlib

import numpy as np


def _tag_word(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    return zlib.crc32(str(tag).encode())


def stream(seed, *tags) -> np.random.Generator:
    """Independent Philox generator for ``seed`` and a path of tags.

    The same (seed, tags) always yields the same stream; distinct tag paths
    give statistically independent streams.
    """
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(0, 2**63))
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_word(t) for t in tags]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def child_seed(seed, *tags) -> int:
    """Derive a plain integer seed for a sub-operation."""
    return int(stream(seed, *tags).integers(0, 2**63))
