"""Deterministic pseudo-random streams keyed by (seed, name).

Every source of randomness in the project goes through a named Stream so
that runs are bit-reproducible and independent components (weight init,
batch shuffling, clip rendering) never share state. The generator is a
counter-based splitmix64, so draws are pure functions of (seed, name,
draw index) and vectorize cleanly.
"""

from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4B7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53_INV = float(2.0**-53)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def derive_key(seed: int, name: str) -> int:
    """Stable 64-bit key for a (seed, name) pair."""
    digest = hashlib.blake2b(f"{seed}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Stream:
    """Sequential draw interface over a splitmix64 counter stream."""

    def __init__(self, seed: int, name: str = ""):
        self._key = np.uint64(derive_key(seed, name))
        self._counter = 0

    def raw(self, n: int) -> np.ndarray:
        """Next n raw uint64 words."""
        idx = np.arange(self._counter, self._counter + n, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix(self._key + (idx + np.uint64(1)) * _GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """n float64 samples in [0, 1)."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _U53_INV

    def normal(self, shape) -> np.ndarray:
        """Standard normal samples via Box-Muller, float64."""
        size = int(np.prod(shape)) if shape else 1
        pairs = (size + 1) // 2
        u1 = (self.raw(pairs) >> np.uint64(11)).astype(np.float64)
        u1 = (u1 + 1.0) * _U53_INV  # (0, 1], keeps log finite
        u2 = self.uniform(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:size].reshape(shape)

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n ints in [0, bound), bound < 2**32."""
        if not 0 < bound < 2**32:
            raise ValueError(f"bound out of range: {bound}")
        return ((self.raw(n) >> np.uint64(32)) * np.uint64(bound) >> np.uint64(32)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        if n > 1:
            draws = self.integers(n - 1, 2**31)
            for i in range(n - 1, 0, -1):
                j = int(draws[n - 1 - i] % (i + 1))
                perm[i], perm[j] = perm[j], perm[i]
        return perm

    def randint64(self) -> int:
        """One raw 63-bit integer (fits in signed storage)."""
        return int(self.raw(1)[0] >> np.uint64(1))


def he_normal(shape, fan_in: int, seed: int, name: str) -> np.ndarray:
    """He-style init: normal scaled by sqrt(2 / fan_in), float32."""
    scale = np.sqrt(2.0 / float(fan_in))
    return (Stream(seed, name).normal(shape) * scale).astype(np.float32)
