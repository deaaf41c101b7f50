"""Named random sub-streams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *names: str | int) -> np.random.Generator:
    """Independent generator for ``(seed, *names)``; stable across runs and platforms."""
    key = [int(seed) & 0xFFFFFFFF]
    for n in names:
        key.append(zlib.crc32(n.encode()) if isinstance(n, str) else int(n) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(key))
