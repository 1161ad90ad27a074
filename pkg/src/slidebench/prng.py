"""Portable seeded pseudo-random generator used everywhere determinism matters.

The generator is SplitMix64 used in counter mode: output i of a stream with
seed s is ``mix64((s + (i + 1) * GOLDEN) mod 2**64)`` where ``mix64`` is the
standard SplitMix64 finalizer (Steele, Lea & Flood 2014). It is a 64-bit
counter-based generator, so any output can be computed independently of the
others, draws vectorize, and the stream is identical on every platform:
the only operations involved are 64-bit integer add/mul/xor/shift and IEEE
double multiplication by 2**-53.

Uniform doubles are derived as ``(u >> 11) * 2**-53`` (53 top bits), giving
values in [0, 1). Bounded integers use rejection sampling, so they are
unbiased and portable.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1

_U64_GOLDEN = np.uint64(GOLDEN)
_U64_M1 = np.uint64(0xBF58476D1CE4E5B9)
_U64_M2 = np.uint64(0x94D049BB133111EB)


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a 64-bit integer."""
    x &= _MASK
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK
    x ^= x >> 31
    return x


def u64_at(seed: int, index: int) -> int:
    """The index-th raw 64-bit output of the stream with the given seed."""
    return mix64((seed + (index + 1) * GOLDEN) & _MASK)


def u64_array(seed: int, start: int, count: int) -> np.ndarray:
    """Vectorized ``u64_at`` for indices [start, start + count)."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    z = np.uint64(seed & _MASK) + idx * _U64_GOLDEN
    z ^= z >> np.uint64(30)
    z *= _U64_M1
    z ^= z >> np.uint64(27)
    z *= _U64_M2
    z ^= z >> np.uint64(31)
    return z


def uniform01_array(seed: int, start: int, count: int) -> np.ndarray:
    """Vectorized uniform [0, 1) doubles for counter indices [start, start+count)."""
    return (u64_array(seed, start, count) >> np.uint64(11)).astype(np.float64) * 2.0**-53


class SplitMix64Stream:
    """Sequential view over the counter-based stream.

    Consumes counter indices one draw at a time so interleaved scalar and
    vector draws stay reproducible.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK
        self._pos = 0

    def next_u64(self) -> int:
        value = u64_at(self.seed, self._pos)
        self._pos += 1
        return value

    def uniform(self, count: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Array of ``count`` uniform doubles in [low, high)."""
        u = uniform01_array(self.seed, self._pos, count)
        self._pos += count
        return low + (high - low) * u

    def randint_below(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def shuffle(self, items: list) -> list:
        """Fisher-Yates shuffle; returns a new list, input untouched."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.randint_below(i + 1)
            out[i], out[j] = out[j], out[i]
        return out
