"""64-bit hash and PRNG primitives with fixed, documented definitions."""

import numpy as np
from numba import njit

MASK64 = (1 << 64) - 1

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


# below this length the JIT call overhead outweighs the loop
_JIT_THRESHOLD = 256


def fnv1a64_reference(data: bytes) -> int:
    h = FNV64_OFFSET
    for b in data:
        h = ((h ^ b) * FNV64_PRIME) & MASK64
    return h


@njit(cache=True, nogil=True)
def _fnv1a64_kernel(buf):
    h = np.uint64(FNV64_OFFSET)
    prime = np.uint64(FNV64_PRIME)
    for i in range(buf.shape[0]):
        h = (h ^ np.uint64(buf[i])) * prime
    return h


def fnv1a64(data: bytes) -> int:
    """FNV-1a, 64-bit.  Long inputs (object and table documents) use a JIT loop."""
    if len(data) < _JIT_THRESHOLD:
        return fnv1a64_reference(data)
    return int(_fnv1a64_kernel(np.frombuffer(data, dtype=np.uint8)))


def mix64(z: int) -> int:
    """splitmix64 output finalizer."""
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def djb2_64(data: bytes) -> int:
    # h*33 + c, the classic GNU symbol hash widened to 64 bits, then mixed
    h = 5381
    for b in data:
        h = (h * 33 + b) & MASK64
    return mix64(h)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)
