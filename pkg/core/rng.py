"""Seed derivation.

Every random draw in a run comes from a generator derived from the run seed and
a tuple of keys naming its purpose, e.g. ``("client", round, client_id)``.
Generators for unrelated purposes never share state, so adding a draw in one
place never shifts the numbers seen elsewhere.
"""

import zlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _key_to_int(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"seed keys must be non-negative, got {key}")
    return int(key)


def seed_sequence(seed: int, *keys: Key) -> np.random.SeedSequence:
    """Build the SeedSequence for ``keys`` under the run seed."""
    return np.random.SeedSequence(entropy=_key_to_int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))


def substream(seed: int, *keys: Key) -> np.random.Generator:
    """Return an independent PCG64 generator for ``keys``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *keys)))


def counter_stream(seed: int, *keys: Key) -> np.random.Generator:
    """Return an independent Philox4x64 (counter-based) generator for ``keys``.

    Used where the stream is part of an external contract (mask vectors), so the
    bit generator is pinned by name rather than left to numpy's default.
    """
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *keys)))
