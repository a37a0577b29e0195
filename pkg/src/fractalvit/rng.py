"""Seeded pseudo-random streams: splitmix64 expanding into xoshiro256**.

Both algorithms are fixed here (rather than delegating to ``random`` or
numpy generators) so that a given seed produces the same stream on every
platform and interpreter version.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64_next(state: int) -> tuple[int, int]:
    """One step of splitmix64; returns (output, new_state)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31), state


def substream_seed(seed: int, index: int) -> int:
    """The index-th output of the splitmix64 sequence started at ``seed``.

    Used to derive independent sub-seeds (parameter init, data shuffling,
    ...) from one user-facing seed.
    """
    if index < 0:
        raise ValueError("substream index must be non-negative")
    state = seed & _MASK64
    out = 0
    for _ in range(index + 1):
        out, state = _splitmix64_next(state)
    return out


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """xoshiro256** generator whose state is seeded through splitmix64."""

    __slots__ = ("_s",)

    def __init__(self, seed: int):
        state = seed & _MASK64
        s = []
        for _ in range(4):
            word, state = _splitmix64_next(state)
            s.append(word)
        self._s = s

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform float64 in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n), unbiased via rejection."""
        if n <= 0:
            raise ValueError("below() needs a positive bound")
        threshold = ((1 << 64) // n) * n
        while True:
            v = self.next_u64()
            if v < threshold:
                return v % n

    def normal(self) -> float:
        """Standard normal draw (Box-Muller; consumes two uniforms)."""
        u1 = 1.0 - self.random()  # (0, 1], keeps log finite
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def truncated_normal(self, std: float = 1.0, clip: float = 2.0) -> float:
        """Normal draw rejected until within ``clip`` standard deviations."""
        while True:
            z = self.normal()
            if abs(z) <= clip:
                return z * std

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def uniform_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.array([self.random() for _ in range(n)]).reshape(shape)

    def normal_array(self, shape, std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape))
        return np.array([self.normal() * std for _ in range(n)]).reshape(shape)

    def truncated_normal_array(self, shape, std: float, clip: float = 2.0) -> np.ndarray:
        n = int(np.prod(shape))
        return np.array(
            [self.truncated_normal(std, clip) for _ in range(n)]
        ).reshape(shape)
