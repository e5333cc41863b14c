"""Seed derivation and buffered random streams.

Per-episode seeds are a pure function of ``(master_seed, task_id, trial)``::

    episode_seed = mix64(mix64(master_seed ^ fnv1a64(task_id)) ^ trial)

where ``mix64`` is the SplitMix64 finalizer. Execution order therefore
never affects which numbers an episode sees. Each episode seed is expanded
with ``numpy.random.SeedSequence`` into four independent streams, always
spawned in this order: actuation, grasp, sensor, agents.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
STREAM_NAMES = ("actuation", "grasp", "sensor", "agents")


def mix64(x: int) -> int:
    """SplitMix64 finalizer: a bijective 64-bit avalanche mix."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & MASK64
    return h


def episode_seed(master_seed: int, task_id: str, trial: int) -> int:
    return mix64(mix64((master_seed & MASK64) ^ fnv1a64(task_id)) ^ (trial & MASK64))


def replicate_seed(master_seed: int, replicate: int) -> int:
    """Master seed of the ``replicate``-th independent seed block."""
    return mix64((master_seed & MASK64) ^ mix64(replicate + 1))


class Stream:
    """A numpy Generator with block-buffered scalar draws.

    Scalar ``normal()``/``random()`` calls are served from pre-drawn blocks,
    which is much cheaper than one numpy call per draw. Normals and uniforms
    come from separate blocks, so the sequence of each kind depends only on
    how many of that kind were drawn before.
    """

    __slots__ = ("gen", "_block", "_n", "_ni", "_u", "_ui")

    def __init__(self, seed_seq: np.random.SeedSequence, block: int = 512):
        self.gen = np.random.Generator(np.random.PCG64(seed_seq))
        self._block = block
        self._n: list[float] = []
        self._ni = 0
        self._u: list[float] = []
        self._ui = 0

    def normal(self) -> float:
        if self._ni >= len(self._n):
            self._n = self.gen.standard_normal(self._block).tolist()
            self._ni = 0
        v = self._n[self._ni]
        self._ni += 1
        return v

    def normals(self, k: int) -> list[float]:
        if self._ni + k > len(self._n):
            rest = self._n[self._ni:]
            self._n = rest + self.gen.standard_normal(max(self._block, k)).tolist()
            self._ni = 0
        out = self._n[self._ni:self._ni + k]
        self._ni += k
        return out

    def random(self) -> float:
        if self._ui >= len(self._u):
            self._u = self.gen.random(self._block).tolist()
            self._ui = 0
        v = self._u[self._ui]
        self._ui += 1
        return v

    def choice(self, n: int) -> int:
        """Uniform index in ``range(n)``."""
        return min(int(self.random() * n), n - 1)


class EpisodeStreams:
    """The four named sub-streams of one episode."""

    def __init__(self, seed: int):
        self.seed = seed
        children = np.random.SeedSequence(seed & MASK64).spawn(len(STREAM_NAMES))
        self.actuation, self.grasp, self.sensor, self.agents = (Stream(c) for c in children)
