"""Seeded random source.

Uniform draws come from numpy's PCG64 bit generator (a documented,
platform-independent stream). Normals use the Box-Muller transform of that
uniform stream so the mapping from state to values is fully specified here.
"""

from __future__ import annotations

import numpy as np

from .tensor import get_dtype

_WORD = 1 << 16


class Rng:
    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        if not low < high:
            raise ValueError(f"uniform: need low < high, got ({low}, {high})")
        u = self._gen.random(shape)
        return (low + (high - low) * u).astype(get_dtype())

    def normal(self, shape=()) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = 1.0 - self._gen.random(m)  # (0, 1]
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape).astype(get_dtype())

    def permutation(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("permutation: n must be nonnegative")
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high)."""
        if not low < high:
            raise ValueError(f"integers: need low < high, got ({low}, {high})")
        return self._gen.integers(low, high, size=shape)

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), in draw order."""
        return self.permutation(n)[:k]

    def spawn(self, key: int) -> "Rng":
        """Independent child stream for a numbered sub-task."""
        return Rng(int(np.random.SeedSequence([self.seed, int(key)]).generate_state(1, np.uint64)[0]))

    # state capture as 16-bit words so it survives a float32 container exactly
    def get_state(self) -> np.ndarray:
        st = self._gen.bit_generator.state
        words = []
        for value in (st["state"]["state"], st["state"]["inc"]):
            words += [(value >> (16 * i)) & 0xFFFF for i in range(8)]
        words += [st["has_uint32"], st["uinteger"] & 0xFFFF, st["uinteger"] >> 16]
        words += [(self.seed >> (16 * i)) & 0xFFFF for i in range(4)]
        return np.array(words, dtype=np.float64)

    def set_state(self, words) -> None:
        w = [int(x) for x in np.asarray(words).reshape(-1)]
        if len(w) != 23:
            raise ValueError(f"rng state must have 23 words, got {len(w)}")
        state = sum(w[i] << (16 * i) for i in range(8))
        inc = sum(w[8 + i] << (16 * i) for i in range(8))
        self.seed = sum(w[19 + i] << (16 * i) for i in range(4))
        self._gen.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": state, "inc": inc},
            "has_uint32": w[16],
            "uinteger": w[17] | (w[18] << 16),
        }

    @classmethod
    def from_state(cls, words) -> "Rng":
        rng = cls(0)
        rng.set_state(words)
        return rng
