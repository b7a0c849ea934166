"""Reproducible random substreams.

Every random draw in the package comes from a Philox generator keyed by
``(master seed, purpose tag, indices...)``.  A task's stream depends only on
its key, never on scheduling, so results do not change with worker count.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_code(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


class RandomStreams:
    """Factory of independent counter-based generators derived from one seed.

    Args:
        seed: master seed, reduced to an unsigned 64-bit value.
        prefix: key components prepended to every derived stream.
    """

    def __init__(self, seed: int = 0, prefix: tuple[int, ...] = ()):
        self.seed = int(seed) & _MASK64
        self.prefix = tuple(int(k) for k in prefix)

    def __repr__(self) -> str:
        return f"RandomStreams(seed={self.seed}, prefix={self.prefix})"

    def _key(self, tag: str, indices) -> tuple[int, ...]:
        return self.prefix + (_tag_code(tag),) + tuple(int(i) for i in indices)

    def seed_sequence(self, tag: str, *indices: int) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.seed, spawn_key=self._key(tag, indices))

    def generator(self, tag: str, *indices: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(self.seed_sequence(tag, *indices)))

    def child(self, tag: str, *indices: int) -> "RandomStreams":
        """Streams nested under ``tag`` and ``indices``; disjoint from siblings."""
        return RandomStreams(self.seed, self._key(tag, indices))


def as_streams(rng) -> RandomStreams:
    """Coerce an int seed, ``None`` or a :class:`RandomStreams` into streams."""
    if isinstance(rng, RandomStreams):
        return rng
    if rng is None:
        return RandomStreams(0)
    if isinstance(rng, (int, np.integer)):
        return RandomStreams(int(rng))
    raise TypeError(f"expected seed or RandomStreams, got {type(rng).__name__}")
