"""Deterministic pseudo-random numbers.

A single fixed generator (xoshiro256** seeded through splitmix64) backs
every stochastic choice in this package, so a run is replayable from its
integer seed alone, on any platform. Streams for distinct purposes are
derived by XOR-ing the seed with a 64-bit tag hashed from a purpose
string (FNV-1a), which keeps independent parts of the pipeline from
sharing draw order.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1


def fnv1a64(text: str) -> int:
    """64-bit FNV-1a hash of a purpose string, used as a sub-seed tag."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31), state


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """xoshiro256** generator with splitmix64 state expansion.

    Equal seeds produce equal streams. Not safe for concurrent use; hand
    each worker its own derived instance instead.
    """

    __slots__ = ("seed", "_s0", "_s1", "_s2", "_s3", "_spare_normal")

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        sm = self.seed
        self._s0, sm = _splitmix64(sm)
        self._s1, sm = _splitmix64(sm)
        self._s2, sm = _splitmix64(sm)
        self._s3, sm = _splitmix64(sm)
        self._spare_normal: float | None = None

    def derive(self, purpose: str) -> "Rng":
        """Fresh generator for a named purpose (seed XOR fnv1a64(purpose))."""
        return Rng(self.seed ^ fnv1a64(purpose))

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s0, self._s1, self._s2, self._s3
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s0, self._s1, self._s2, self._s3 = s0, s1, s2, s3
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randint(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        limit = _MASK64 + 1 - ((_MASK64 + 1) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def normal(self) -> float:
        """Standard normal via Box-Muller; pairs are cached."""
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        # +1 keeps u1 in (0, 1] so log never sees zero.
        u1 = ((self.next_u64() >> 11) + 1) * (2.0 ** -53)
        u2 = (self.next_u64() >> 11) * (2.0 ** -53)
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare_normal = r * math.sin(theta)
        return r * math.cos(theta)

    def normals(self, shape: tuple[int, ...] | int, dtype=np.float32) -> np.ndarray:
        n = int(np.prod(shape))
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.normal()
        return out.reshape(shape).astype(dtype)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, items: list, k: int) -> list:
        """k draws without replacement, by partial Fisher-Yates."""
        if k > len(items):
            raise ValueError(f"cannot sample {k} from {len(items)} items")
        pool = list(items)
        for i in range(k):
            j = i + self.randint(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]
