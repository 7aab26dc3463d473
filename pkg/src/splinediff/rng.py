"""Deterministic, splittable random streams.

Every stochastic operation in the package draws from an :class:`RngStream`,
identified by a 64-bit seed plus a split lineage (a tuple of integers).  The
same (seed, path) always reproduces the same draws, and distinct paths give
statistically independent streams, so parallel work can be seeded
order-independently.

Streams are implemented on top of numpy's ``SeedSequence`` / ``Philox``:
``SeedSequence(seed, spawn_key=path)`` hashes seed-and-path into the
generator state, which is exactly the counter-based split semantics we need.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class RngStream:
    """A value-semantics random stream: (seed, path) fully determines draws."""

    seed: int
    path: tuple[int, ...] = field(default_factory=tuple)

    def split(self, index: int) -> "RngStream":
        """Child stream with the lineage extended by ``index``."""
        return RngStream(self.seed, self.path + (int(index),))

    def generator(self) -> np.random.Generator:
        """Fresh numpy Generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))


def stream(seed: int, *path: int) -> RngStream:
    return RngStream(int(seed), tuple(int(p) for p in path))
