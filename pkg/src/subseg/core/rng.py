"""Seeded xoshiro256** generator.

Algorithm (so any language can reproduce the stream):

* seeding: the four 64-bit state words are four consecutive outputs of
  splitmix64 started at ``seed`` (``x += 0x9E3779B97F4A7C15``; then
  ``z = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9``,
  ``z = (z ^ (z >> 27)) * 0x94D049BB133111EB``, output ``z ^ (z >> 31)``);
* step: xoshiro256** (Blackman & Vigna), output ``rotl(s1 * 5, 7) * 9``;
* ``random()``: ``(u64 >> 11) * 2**-53`` in [0, 1);
* ``normal()``: Box-Muller cosine branch from two consecutive uniforms
  ``u1, u2``: ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``;
* ``integers(n)``: ``floor(random() * n)``;
* ``derive(seed, *keys)``: folds each key into the seed through splitmix64,
  giving independent named sub-streams.

Test vectors live in ``tests/test_rng.py``.
"""

from __future__ import annotations

import math

import numpy as np

from subseg import _kernels

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step. Returns ``(new_state, output)``."""
    x = (x + _GOLDEN) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def derive(seed: int, *keys: int | str) -> int:
    """Deterministic sub-seed for a named stream, e.g. ``derive(seed, "batch", it)``."""
    h = seed & MASK64
    for key in keys:
        if isinstance(key, str):
            # FNV-1a, so string keys do not depend on Python's hash randomization
            v = 0xCBF29CE484222325
            for byte in key.encode():
                v = ((v ^ byte) * 0x100000001B3) & MASK64
            key = v
        _, h = splitmix64(h ^ (int(key) & MASK64))
    return h


class Rng:
    """xoshiro256** stream. Scalar draws are pure Python; bulk draws go through the kernel."""

    def __init__(self, seed: int):
        self.seed = seed & MASK64
        x = self.seed
        words = []
        for _ in range(4):
            x, out = splitmix64(x)
            words.append(out)
        self._state = np.array(words, dtype=np.uint64)

    def next_u64(self) -> int:
        out = np.empty(1, dtype=np.uint64)
        _kernels.xoshiro_fill(self._state, out)
        return int(out[0])

    def u64_array(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint64)
        if n:
            _kernels.xoshiro_fill(self._state, out)
        return out

    def random(self) -> float:
        return (self.next_u64() >> 11) * 2.0 ** -53

    def random_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return ((self.u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53).reshape(shape)

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def integers(self, n: int) -> int:
        """Uniform integer in ``[0, n)``."""
        if n <= 0:
            raise ValueError(f"integers: n must be positive, got {n}")
        return min(int(self.random() * n), n - 1)

    def normal(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        u = self.random_array((n, 2))
        z = np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * math.pi * u[:, 1])
        return z.reshape(shape)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)`` (from the top index down)."""
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def sample_without_replacement(self, n: int, k: int) -> list[int]:
        if k > n:
            raise ValueError(f"cannot draw {k} items without replacement from {n}")
        return self.permutation(n)[:k]

    def getstate(self) -> tuple[int, ...]:
        return tuple(int(v) for v in self._state)

    def setstate(self, state) -> None:
        self._state = np.array(state, dtype=np.uint64)
