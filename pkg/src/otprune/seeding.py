import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named sub-stream ("init", "order", "augment", ...)."""
    return np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(zlib.crc32(name.encode()),)))
