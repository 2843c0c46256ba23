"""Portable pseudo-random numbers for simulated observation noise.

xoshiro256** (Blackman & Vigna) seeded through splitmix64, with normal
deviates from the Box-Muller transform. Pure integer arithmetic, so a seed
gives the same stream on every platform and numpy version.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK


def splitmix64(state: int):
    """One splitmix64 step; returns ``(output, new_state)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31), state


class Xoshiro256:
    """xoshiro256** generator."""

    def __init__(self, seed: int = 0):
        sm = int(seed) & _MASK
        s = []
        for _ in range(4):
            out, sm = splitmix64(sm)
            s.append(out)
        self.s = s
        self._spare = None

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & _MASK, 7) * 9) & _MASK
        t = (s[1] << 17) & _MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self) -> float:
        """Double in ``[0, 1)`` from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def normal(self) -> float:
        """Standard normal deviate (Box-Muller, both values used)."""
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self.uniform()  # (0, 1]
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def normals(self, n: int, sigma: float = 1.0, mean: float = 0.0) -> np.ndarray:
        return np.array([mean + sigma * self.normal() for _ in range(int(n))])
