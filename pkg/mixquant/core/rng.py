"""
SplitMix64 random streams

Every random draw in mixquant (initialization, shuffling, synthetic data,
Hutchinson vectors) comes from an explicitly seeded stream, so results are
identical across runs and machines.
"""

import numpy as np
from scipy.special import ndtr, ndtri

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_CHILD = 0xD1B54A32D192ED03


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    """Fold integer keys into a seed, for independent sub-streams"""
    state = seed & _MASK64
    for key in keys:
        state = int(_mix(np.array([(state ^ ((key * _CHILD) & _MASK64)) & _MASK64], dtype=np.uint64))[0])
    return state


class SplitMix64:
    """Counter-based SplitMix64: draw i is mix(seed + (i + 1) * golden)"""

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_uint64(self, size=1) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        count = int(np.prod(shape))
        steps = np.arange(self.counter + 1, self.counter + 1 + count, dtype=np.uint64)
        self.counter += count
        with np.errstate(over="ignore"):
            state = np.uint64(self.seed) + steps * _GOLDEN
        return _mix(state).reshape(shape)

    def uniform(self, size=1) -> np.ndarray:
        """Float64 in [0, 1) from the top 53 bits"""
        return (self.next_uint64(size) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def normal(self, size=1) -> np.ndarray:
        """Standard normals by Box-Muller"""
        shape = (size,) if isinstance(size, int) else tuple(size)
        count = int(np.prod(shape))
        u1 = 1.0 - self.uniform(count)
        u2 = self.uniform(count)
        return (np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)).reshape(shape)

    def truncated_normal(self, size=1, std: float = 1.0, bound: float = 2.0) -> np.ndarray:
        """Normal restricted to [-bound, bound] standard deviations, by inverse CDF"""
        lo, hi = ndtr(-bound), ndtr(bound)
        u = self.uniform(size)
        return ndtri(lo + u * (hi - lo)) * std

    def rademacher(self, size=1) -> np.ndarray:
        bits = self.next_uint64(size) >> np.uint64(63)
        return np.where(bits == 1, 1.0, -1.0)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def child(self, key: int) -> "SplitMix64":
        return SplitMix64(derive_seed(self.seed, key))
