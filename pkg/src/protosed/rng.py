"""Named, reproducible RNG substreams derived from a single integer seed."""
from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, *names: str | int) -> np.random.Generator:
    """Generator for the stream identified by ``names`` under ``seed``.

    The same (seed, names) pair always yields the same stream, and distinct
    names yield statistically independent streams.
    """
    key = tuple(n if isinstance(n, int) else zlib.crc32(str(n).encode()) for n in names)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
