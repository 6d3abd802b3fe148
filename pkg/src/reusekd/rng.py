"""Deterministic random number streams.

Every stochastic choice in this package (weight init, mask sampling,
synthetic data) flows through :class:`Rng`. The generator is frozen to
numpy's PCG64 bit generator; child streams are derived with
``numpy.random.SeedSequence`` so that a single 64-bit seed plus a path of
string/int tags fully determines every draw, independent of call order
elsewhere in the program.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_to_int(tag: str | int) -> int:
    if isinstance(tag, int):
        return tag & _MASK64
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """A named, reproducible random stream (PCG64 under the hood).

    Identical seed => identical stream. ``derive`` builds statistically
    independent child streams keyed by tags, so components can own their
    randomness without coordinating draw order.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, *tags: str | int) -> "Rng":
        """Child stream deterministically keyed by (our seed, tags)."""
        material = [self.seed] + [_tag_to_int(t) for t in tags]
        child = np.random.SeedSequence(material).generate_state(1, np.uint64)[0]
        return Rng(int(child))

    def normal(self, shape: tuple[int, ...] | int, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape).astype(np.float64)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None) -> np.ndarray | float:
        out = self._gen.uniform(low, high, size=shape)
        return float(out) if shape is None else out.astype(np.float64)

    def integer(self, low: int, high: int) -> int:
        """One integer drawn uniformly from [low, high] inclusive."""
        return int(self._gen.integers(low, high + 1))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"
