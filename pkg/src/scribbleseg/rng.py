"""Deterministic pseudo-random streams: splitmix64-seeded xoshiro256**.

Every stochastic choice in this package (weight init, patch masking,
phantom synthesis, batch shuffling) draws from these generators, so a
(seed, stream, index) triple pins artifacts down byte for byte regardless
of platform or numpy version.  Streams for independent purposes are
derived with `derive_seed`, never by sharing generator state.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# Stream tags used with derive_seed throughout the package.
STREAM_PHANTOM = 1
STREAM_SCRIBBLE = 2
STREAM_INIT = 3
STREAM_TRAIN = 4


def mix64(z: int) -> int:
    """splitmix64 finalizer; a bijective scramble of a 64-bit word."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Seed sequencer from the splitmix64 reference recurrence."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        return mix64(self._state)


def derive_seed(seed: int, *keys: int) -> int:
    """Mix (seed, keys...) into a single 64-bit stream seed.

    Distinct key tuples give statistically independent streams; use this to
    partition per-purpose and per-sample generators instead of sharing one
    generator across tasks.
    """
    h = mix64((seed & _MASK64) ^ _GOLDEN)
    for k in keys:
        h = mix64(h ^ mix64((k + _GOLDEN) & _MASK64))
    return h


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256StarStar:
    """xoshiro256** 1.0, state seeded with four splitmix64 outputs."""

    def __init__(self, seed: int):
        sm = SplitMix64(seed)
        self._s = [sm.next_u64() for _ in range(4)]
        self._spare_normal: float | None = None

    # -- state save/restore (used for exact training resume) --------------

    def get_state(self) -> tuple:
        return (tuple(self._s), self._spare_normal)

    def set_state(self, state: tuple) -> None:
        s, spare = state
        self._s = [int(x) & _MASK64 for x in s]
        self._spare_normal = None if spare is None else float(spare)

    # -- core generator ----------------------------------------------------

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
        """Uniform double in [0, 1) built from the top 53 bits."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError(f"randbelow bound must be positive, got {n}")
        limit = _MASK64 + 1 - ((_MASK64 + 1) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def normal(self) -> float:
        """Standard normal via Box-Muller (cached spare)."""
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        # 1 - random() keeps u1 in (0, 1] so log is finite.
        u1 = 1.0 - self.random()
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare_normal = r * math.sin(theta)
        return r * math.cos(theta)

    # -- array helpers -----------------------------------------------------

    def uniforms(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """Array of uniforms filled in row-major draw order."""
        size = int(np.prod(shape))
        out = np.empty(size, dtype=np.float64)
        for i in range(size):
            out[i] = self.random()
        if lo != 0.0 or hi != 1.0:
            out = lo + (hi - lo) * out
        return out.reshape(shape)

    def normals(self, shape) -> np.ndarray:
        """Array of standard normals filled in row-major draw order."""
        size = int(np.prod(shape))
        out = np.empty(size, dtype=np.float64)
        for i in range(size):
            out[i] = self.normal()
        return out.reshape(shape)

    def shuffle(self, xs: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(xs) - 1, 0, -1):
            j = self.randbelow(i + 1)
            xs[i], xs[j] = xs[j], xs[i]

    def choice(self, xs):
        return xs[self.randbelow(len(xs))]
