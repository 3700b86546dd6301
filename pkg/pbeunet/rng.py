"""Seed derivation for reproducible, order-independent random streams."""
import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One step of the splitmix64 counter-based generator."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def stream_seed(seed: int, index: int) -> int:
    """Seed of the index-th stream; independent of generation order."""
    return splitmix64((seed ^ index) & MASK64)


def named_seed(seed: int, name: str) -> int:
    """Seed of a named stream, e.g. one parameter block."""
    return splitmix64((seed ^ zlib.crc32(name.encode("utf-8"))) & MASK64)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed & MASK64)
