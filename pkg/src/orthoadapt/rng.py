"""Named random sub-streams split from one master seed.

Every consumer of randomness (data generation, mask sampling, adapter
initialization, corruption noise) draws from its own stream, so changing how
many mask draws a run makes never perturbs, say, the adapter initialization.
Streams are numpy ``Generator`` objects (PCG64) seeded through
``SeedSequence`` with a spawn key derived from the stream name.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "mask", "init", "corruption", "pretrain", "toy")


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return the generator for sub-stream ``name`` of master ``seed``.

    ``extra`` integers further specialise the stream (e.g. a sample index),
    giving independent draws per item without sequential coupling.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    key = (_name_key(name),) + tuple(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def derive_seed(seed: int, name: str, *extra: int) -> int:
    """A 63-bit integer seed derived from ``(seed, name, *extra)``."""
    return int(stream(seed, name, *extra).integers(0, 2**63 - 1))
