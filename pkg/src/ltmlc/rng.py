"""Portable 64-bit random streams.

The generator is SplitMix64, which is counter based: the k-th output of a
stream seeded with ``s`` is ``mix(s + (k + 1) * GOLDEN)`` modulo 2**64.  That
makes bulk draws a single vectorized numpy expression while staying
bit-compatible with a scalar implementation in any language.

Derived variates:

* uniform: top 53 bits of an output, scaled to [0, 1).
* normal: Box-Muller on consecutive uniform pairs (u1, u2); each pair yields
  ``r*cos(2*pi*u2)`` then ``r*sin(2*pi*u2)`` with ``r = sqrt(-2*log(1 - u1))``.
  An odd request discards the trailing sine value.
* gamma: Marsaglia-Tsang squeeze method (with the ``alpha < 1`` boost).
* beta: ``g1 / (g1 + g2)`` for two gamma draws.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB

FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MUL1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MUL2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Seeded SplitMix64 stream with numpy bulk draws."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self, n: int) -> np.ndarray:
        """Return the next ``n`` raw outputs as uint64 and advance the state."""
        if n < 0:
            raise ValueError("n must be non-negative")
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + k * np.uint64(GOLDEN)
            out = _mix(z)
        self.state = (self.state + n * GOLDEN) & MASK64
        return out

    def uniform(self, n: int | None = None):
        """Uniform draws in [0, 1); scalar when ``n`` is None."""
        u = (self.next_u64(1 if n is None else n) >> np.uint64(11)).astype(np.float64)
        u *= 2.0 ** -53
        return float(u[0]) if n is None else u

    def normal(self, n: int | None = None):
        m = 1 if n is None else n
        u = self.uniform(2 * ((m + 1) // 2)).reshape(-1, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:m]
        return float(z[0]) if n is None else z

    def gamma(self, alpha: float) -> float:
        if alpha <= 0:
            raise ValueError("gamma shape must be positive")
        if alpha < 1.0:
            g = self.gamma(alpha + 1.0)
            u = self.uniform()
            return g * (1.0 - u) ** (1.0 / alpha)
        d = alpha - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = 1.0 - self.uniform()
            if u < 1.0 - 0.0331 * x ** 4:
                return d * v
            if math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
                return d * v

    def beta(self, a: float, b: float) -> float:
        g1 = self.gamma(a)
        g2 = self.gamma(b)
        return g1 / (g1 + g2)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)`` (swap i with j in [0, i])."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for step, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[step] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self) -> "SplitMix64":
        """Child stream seeded from the next output of this one."""
        return SplitMix64(int(self.next_u64(1)[0]))
