"""Reproducible random streams.

Every random draw in scotopic comes from a Philox (counter-based) generator
addressed by an integer seed plus a tuple of integer keys, e.g.
``make_rng(seed, Purpose.STREAM, example_index)``. The same address always
yields the same stream, independent of how many other streams were used
before it, so per-example work can be reordered or parallelized without
changing any result.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np

Seed = int | np.random.Generator


class Purpose(IntEnum):
    STREAM = 1
    READOUT = 2
    TRAIN = 3
    INIT = 4
    BOOTSTRAP = 5
    SPLIT = 6
    LIGHT = 7


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Returns a Philox generator for the address (seed, *keys)."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(sequence))


def derive_seed(seed: int, *keys: int) -> int:
    """Derives a child integer seed, for APIs that take a plain seed."""
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def as_generator(seed: Seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return make_rng(seed)
