"""Counter-based splittable random streams.

Every stochastic component takes a RandomStream instead of a bare seed so that
Monte Carlo work can be partitioned into independent substreams (one per batch,
per worker, per sweep point) without any sequence coupling between them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _mix64(x: int) -> int:
    # SplitMix64 finalizer; full-avalanche 64-bit mixing.
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RandomStream:
    """Keyed handle on one random stream.

    Identical (root_seed, stream_id) pairs always yield identical draw
    sequences; distinct stream ids select independent Philox counter streams.
    """

    root_seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        key = [self.root_seed & _MASK64, self.stream_id & _MASK64]
        return np.random.Generator(np.random.Philox(key=key))

    def split(self, index: int) -> "RandomStream":
        """Derive child stream `index`; children of distinct parents differ."""
        child = _mix64(self.stream_id ^ _mix64(index + 1))
        return RandomStream(self.root_seed, child)
