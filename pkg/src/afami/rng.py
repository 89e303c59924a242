"""Counter-based random streams.

Every random draw in the package comes from ``stream(seed, *keys)``: a Philox
generator whose key is derived from the master seed and a stream id. Two calls
with the same arguments return generators producing identical sequences, no
matter what else has been drawn in between.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_int(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"stream keys must be non-negative, got {key}")
    return int(key)


def stream(seed: int, *keys: int | str) -> np.random.Generator:
    """Independent generator for stream ``keys`` under master ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
