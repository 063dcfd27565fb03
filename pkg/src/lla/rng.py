"""SplitMix64 pseudo-random stream.

Every stochastic component in the package draws from this generator so a
locked model, a key and an attack run are reproducible from integer seeds
on any platform.  Arithmetic is done on ``numpy.uint64`` arrays, which wrap
modulo 2**64 exactly like the reference C implementation.
"""

from __future__ import annotations

import math

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix64(value: int) -> int:
    """The SplitMix64 finaliser applied to a single integer."""
    return int(_mix(np.array([value & _MASK], dtype=np.uint64))[0])


def derive_seed(seed: int, *path: int) -> int:
    """Deterministically derive an independent child seed from ``seed``.

    Used for seed-splitting (per individual, per generation, per role) so that
    the order in which children are consumed never changes their streams.
    """
    s = seed & _MASK
    for label in path:
        s = mix64(s ^ mix64((int(label) + GOLDEN) & _MASK))
    return s


class SplitMix64:
    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be a non-negative integer")
        self.state = seed & _MASK

    def next_u64_array(self, count: int) -> np.ndarray:
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GOLDEN)
            out = _mix(states)
        self.state = (self.state + count * GOLDEN) & _MASK
        return out

    def next_u64(self) -> int:
        return int(self.next_u64_array(1)[0])

    def uniform(self, count: int) -> np.ndarray:
        """Floats in [0, 1) built from the top 53 bits."""
        return (self.next_u64_array(count) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def randbelow(self, bound: int) -> int:
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % bound

    def normal(self, count: int) -> np.ndarray:
        """Standard normal draws via Box-Muller, pairs consumed in order."""
        pairs = (count + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        angle = 2.0 * math.pi * u[:, 1]
        z = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
        return z.reshape(-1)[:count]

    def signs(self, count: int) -> np.ndarray:
        """i.i.d. uniform entries of {-1, +1}; top bit set means -1."""
        top = self.next_u64_array(count) >> np.uint64(63)
        return 1.0 - 2.0 * top.astype(np.float64)

    def permutation(self, size: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(size)``."""
        perm = np.arange(size, dtype=np.int64)
        for i in range(size - 1, 0, -1):
            j = self.randbelow(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def integers(self, bound: int, count: int) -> np.ndarray:
        return np.array([self.randbelow(bound) for _ in range(count)], dtype=np.int64)
