"""Counter-derived random streams.

Every randomized computation draws from a stream keyed by
``(master_seed, replica, module, purpose)``. Keys are mapped to integers with
CRC32 so they are stable across platforms and Python hash seeds. Adding
replicas or changing the number of worker processes never perturbs the
streams of existing replicas.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream key integers must be nonnegative")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *key) -> np.random.Generator:
    """Return an independent generator for ``key`` under master ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def as_generator(rng) -> np.random.Generator:
    """Accept a Generator, an int seed or None."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


class UniformBuffer:
    """Pops Python floats from pre-drawn blocks; used by event loops."""

    def __init__(self, rng: np.random.Generator, block: int = 8192):
        self._rng = rng
        self._block = block
        self._buf: list[float] = []

    def __call__(self) -> float:
        if not self._buf:
            self._buf = self._rng.random(self._block).tolist()
            self._buf.reverse()
        return self._buf.pop()
