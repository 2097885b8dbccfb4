"""Named, seedable random streams.

Every source of randomness in the package (parameter init, synthetic data,
shuffling, augmentation) draws from its own named stream so that adding or
reordering one consumer never perturbs another. Streams are backed by the
counter-based Philox generator; the (seed, name) pair fully determines the
sequence, across runs and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the generator for stream `name` under the run seed."""
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=(_name_key(name),))
    return np.random.Generator(np.random.Philox(ss))
