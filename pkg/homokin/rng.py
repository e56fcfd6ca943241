"""Counter-based random streams keyed by (seed, stream-id)."""
import numpy as np

STREAM_INIT = 0
STREAM_COLLISION = 1
STREAM_PROJECTION = 2
STREAM_PERTURB = 3
STREAM_REFERENCE = 4

_MASK64 = (1 << 64) - 1


def stream_id(base: int, index: int) -> int:
    """派生子流：高 32 位为基础流，低 32 位为成员序号"""
    return ((base & 0xFFFFFFFF) << 32) | (index & 0xFFFFFFFF)


def make_rng(seed: int, stream: int = STREAM_INIT) -> np.random.Generator:
    bit_generator = np.random.Philox(key=((stream & _MASK64) << 64) | (seed & _MASK64))
    return np.random.Generator(bit_generator)
