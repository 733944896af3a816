"""Named deterministic random streams.

A run owns one seed; every consumer (data order, noise z, conditioning
epsilon, init, dropout) pulls from its own named stream so adding a draw in
one place never shifts the values seen by another."""

from __future__ import annotations

import hashlib

import numpy as np

STREAM_NAMES = ("data", "noise-z", "ca-epsilon", "init", "dropout")


def _stable_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


class RngStreams:
    """Per-name generators derived from (seed, sha256(name)); stateful per stream."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gens: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        gen = self._gens.get(name)
        if gen is None:
            seq = np.random.SeedSequence([self.seed, _stable_key(name)])
            gen = np.random.Generator(np.random.PCG64(seq))
            self._gens[name] = gen
        return gen

    def fresh(self, name: str) -> np.random.Generator:
        """A new generator at the stream's initial state (ignores prior draws)."""
        seq = np.random.SeedSequence([self.seed, _stable_key(name)])
        return np.random.Generator(np.random.PCG64(seq))
