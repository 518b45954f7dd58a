"""Reproducible random streams.

Every replica gets its own Philox stream keyed by ``(seed, *key)``. Streams
are derived through :class:`numpy.random.SeedSequence` spawn keys, so the
stream of replica ``i`` does not depend on how many replicas are run or on
which worker runs it.
"""
from __future__ import annotations

import numpy as np

# spawn-key tags keep streams of different experiment kinds apart
TAG_FORWARD = 1
TAG_DUAL = 2
TAG_PAIR = 3
TAG_DIFFERENCE = 4
TAG_KERNEL = 5
TAG_AUDIT = 6


def stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for the stream addressed by ``key``."""
    ss = np.random.SeedSequence(int(seed) & ((1 << 64) - 1), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def replica_streams(seed: int, tag: int, n: int, start: int = 0):
    return [stream(seed, tag, i) for i in range(start, start + n)]
