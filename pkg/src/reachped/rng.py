"""Named deterministic random streams.

Every stochastic component (dropout, masking, shuffling, index building,
synthetic data) draws from its own named stream so that runs are
bit-reproducible and adding a consumer never perturbs the others.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, *names) -> np.ndarray:
    """Derive a 128-bit Philox key from a base seed and a stream name path."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    digest = h.digest()
    return np.frombuffer(digest[:16], dtype=np.uint64)


def named_stream(seed: int, *names) -> np.random.Generator:
    """Counter-based generator for the stream identified by ``names``.

    Streams with distinct name paths are statistically independent; the
    same (seed, names) pair always yields the same sequence.
    """
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *names)))
