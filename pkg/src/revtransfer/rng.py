"""Counter-based SplitMix64 random streams.

Every random draw in the package goes through this module so that a given
integer seed reproduces the same numbers on any platform or language.

Stream definition (see ``docs/rng.md``)::

    GAMMA = 0x9E3779B97F4A7C15
    mix(z):
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        return z ^ (z >> 31)
    draw(seed, i) = mix(seed + (i + 1) * GAMMA)      # all arithmetic mod 2**64

This is exactly the SplitMix64 output sequence for ``seed``; because the
i-th value depends only on (seed, i) it can be produced in vectorised blocks.
"""

from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, tag: int | str) -> int:
    """Seed of an independent child stream; string tags hash through CRC-32."""
    if isinstance(tag, str):
        tag = zlib.crc32(tag.encode("utf-8"))
    return mix64((seed & MASK64) ^ mix64(tag * GAMMA + 1))


class SplitMix64:
    """Sequential reader over the stream ``draw(seed, 0), draw(seed, 1), ...``."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.counter = 0

    def child(self, tag: int | str) -> "SplitMix64":
        return SplitMix64(derive_seed(self.seed, tag))

    def next_u64(self) -> int:
        self.counter += 1
        return mix64(self.seed + self.counter * GAMMA)

    def u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        return _mix64_array(np.uint64(self.seed) + idx * np.uint64(GAMMA))

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray | float:
        """Float64 draws in [low, high) built from the top 53 bits."""
        n = int(np.prod(shape)) if shape != () else 1
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u = low + (high - low) * u
        return float(u[0]) if shape == () else u.reshape(shape)

    def integers(self, low: int, high: int, size: int | None = None):
        """Integers in [low, high) by multiply-shift on the 53-bit uniform."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.uniform((1,) if size is None else (size,))
        vals = low + np.floor(u * (high - low)).astype(np.int64)
        vals = np.minimum(vals, high - 1)
        return int(vals[0]) if size is None else vals

    def permutation(self, n: int) -> np.ndarray:
        """Stable argsort of n fresh 64-bit draws."""
        return np.argsort(self.u64(n), kind="stable")
