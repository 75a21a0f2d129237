"""Sub-seed derivation.

``derive_seed(master, *keys)`` feeds the master seed and the keys (strings
hashed with CRC-32, integers as-is) into a numpy ``SeedSequence`` and takes
its first 32-bit word. One master seed therefore fixes every stream in an
experiment, and each stream is independent of evaluation order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _word(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode())
    return int(key) & 0xFFFFFFFF


def derive_seed(master: int, *keys) -> int:
    entropy = [_word(master)] + [_word(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def rng_for(master: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))
