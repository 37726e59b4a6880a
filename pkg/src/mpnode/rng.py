"""Deterministic random streams: splitmix64-seeded xoshiro256++.

Every artifact-affecting random draw in the package (graph wiring, initial
states, parameter init, epoch shuffles) goes through this module so that a
64-bit seed pins the output down to the bit, independent of numpy version.
Sub-streams are derived with `derive`, e.g. one stream per trajectory.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    """splitmix64 output function."""
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive(seed: int, *indices: int) -> int:
    """Derive a child seed from `seed` and a tuple of stream indices."""
    h = seed & _MASK
    for ix in indices:
        h = _mix((h + ((ix + 1) * _GAMMA)) & _MASK)
    return h


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


class Rng:
    """xoshiro256++ generator seeded through splitmix64."""

    __slots__ = ("_s",)

    def __init__(self, seed: int):
        state = seed & _MASK
        s = []
        for _ in range(4):
            state = (state + _GAMMA) & _MASK
            s.append(_mix(state))
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s0 + s3) & _MASK, 23) + s0) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """One double in [0, 1)."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def uniform_range(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def uniforms(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """Array of uniforms drawn in C order."""
        n = int(np.prod(shape)) if shape else 1
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.uniform()
        if hi != 1.0 or lo != 0.0:
            out = lo + (hi - lo) * out
        return out.reshape(shape)

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection."""
        if n <= 0:
            raise ValueError("below() needs n >= 1")
        limit = _MASK - (_MASK + 1) % n
        while True:
            x = self.next_u64()
            if x <= limit:
                return x % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        order = list(range(n))
        self.shuffle(order)
        return order
