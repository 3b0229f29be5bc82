"""Seedable generator whose full state can be stored as exact float32 values."""
from __future__ import annotations

import numpy as np

_CHUNK = 16  # bits per stored word; float32 holds integers < 2**24 exactly
_WORDS_128 = 128 // _CHUNK


def _split(value: int, words: int) -> list[int]:
    return [(value >> (_CHUNK * i)) & 0xFFFF for i in range(words)]


def _join(parts) -> int:
    return sum(int(p) << (_CHUNK * i) for i, p in enumerate(parts))


class Rng:
    """Thin wrapper over numpy's PCG64 with a serialisable state."""

    def __init__(self, seed: int = 0):
        self.gen = np.random.Generator(np.random.PCG64(seed))

    def random(self, size=None):
        return self.gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def state_words(self) -> np.ndarray:
        st = self.gen.bit_generator.state
        words = _split(st["state"]["state"], _WORDS_128) + _split(st["state"]["inc"], _WORDS_128)
        words += [st["has_uint32"]] + _split(st["uinteger"], 2)
        return np.asarray(words, dtype=np.float32)

    def set_state_words(self, words) -> None:
        w = [int(x) for x in np.asarray(words)]
        if len(w) != 2 * _WORDS_128 + 3:
            raise ValueError(f"bad rng state length {len(w)}")
        self.gen.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": _join(w[:_WORDS_128]), "inc": _join(w[_WORDS_128:2 * _WORDS_128])},
            "has_uint32": w[2 * _WORDS_128],
            "uinteger": _join(w[2 * _WORDS_128 + 1:]),
        }
