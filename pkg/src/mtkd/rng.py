"""Named random sub-streams derived from one global seed."""

import zlib

import numpy as np


def rng_for(seed: int, stream: str, *extra: int) -> np.random.Generator:
    """Generator for ``stream`` (e.g. "data", "init", "shuffle", "augment").

    Streams with different names or extra keys are statistically independent,
    so adding draws to one never shifts another.
    """
    return np.random.default_rng([int(seed), zlib.crc32(stream.encode("utf-8")), *map(int, extra)])
