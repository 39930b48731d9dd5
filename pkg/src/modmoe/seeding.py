"""Named, seed-derived random streams. No wall-clock or address entropy anywhere."""

import zlib

import numpy as np


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for stream ``name`` under run seed ``seed``."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])
