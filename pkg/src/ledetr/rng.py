"""Deterministic splitmix64 generator used for weight initialization.

The generator is counter-based: draw i is a pure function of seed and i,
so a vectorized bulk draw and a sequence of single draws produce the same
stream. All integer arithmetic is modulo 2**64 (numpy uint64 wraparound).
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng64:
    """Splitmix64 stream with 64-bit state."""

    def __init__(self, seed: int):
        self._state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)

    def next_u64(self, n: int) -> np.ndarray:
        """Return the next ``n`` raw 64-bit draws and advance the state."""
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = self._state + idx * _GOLDEN
            out = _mix(states)
            self._state = self._state + np.uint64(n) * _GOLDEN
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in the open interval (0, 1)."""
        bits = self.next_u64(n)
        return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard-normal doubles via Box-Muller."""
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        pairs = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return pairs[:n]
