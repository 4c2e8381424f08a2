"""Portable seeded randomness: SplitMix64 and the draws built on it.

Everything a manifest needs to regenerate a transform comes from here, so the
pipeline is versioned (``PRNG_VERSION``) and must not change silently:

* stream seed for a (model, label) pair: ``derive_seed(effective_seed, label)``
  = first SplitMix64 output of ``effective_seed XOR fnv1a64(label)``
* permutations: Fisher-Yates from the top index down, each swap index drawn
  with ``next_below`` (rejection sampling, no modulo bias)
* sign vectors: one u64 word per 64 columns, bit ``c % 64`` of word
  ``c // 64`` set means column ``c`` is negated
* normals: Box-Muller on pairs of 53-bit uniforms; the n/2 cosine outputs
  come first, then the sine outputs
"""

from __future__ import annotations

import numpy as np

PRNG_VERSION = 1

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # uint64 array arithmetic wraps modulo 2**64, which is what SplitMix64 wants.
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def fnv1a64(label: str) -> int:
    h = _FNV_OFFSET
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & MASK64
    return h


def derive_seed(seed: int, label: str) -> int:
    return mix64(((seed ^ fnv1a64(label)) + GOLDEN_GAMMA) & MASK64)


class SplitMix64:
    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def next_u64_array(self, n: int) -> np.ndarray:
        """The next ``n`` outputs, identical to calling next_u64 n times."""
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GOLDEN_GAMMA)
        states = steps + np.uint64(self.state)
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return _mix64_array(states)

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ValueError("n must be positive")
        floor = (1 << 64) % n
        while True:
            r = self.next_u64()
            if r >= floor:
                return r % n

    def permutation(self, n: int) -> list[int]:
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.next_below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def signs(self, n: int) -> np.ndarray:
        """Vector of n entries in {+1, -1} (float64), one random bit each."""
        words = self.next_u64_array((n + 63) // 64)
        bits = (words[:, None] >> np.arange(64, dtype=np.uint64)[None, :]) & np.uint64(1)
        return 1.0 - 2.0 * bits.ravel()[:n].astype(np.float64)

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles in [0, 1) with 53 random bits each."""
        return (self.next_u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normals(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniforms(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))  # 1 - u in (0, 1]
        angle = 2.0 * np.pi * u[:, 1]
        return np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
