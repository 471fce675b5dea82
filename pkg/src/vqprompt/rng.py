"""Named random sub-streams derived from a single seed."""

import zlib

import numpy as np

STREAMS = ("corpus", "split", "init", "training", "decoding")


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; same (seed, name) gives the same stream."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])
