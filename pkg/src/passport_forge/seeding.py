"""Deterministic named RNG substreams for reproducible experiments."""

from __future__ import annotations

import zlib

import numpy as np


class SeedStreams:
    """Independent per-consumer generators derived from one base seed.

    Each name maps to its own PCG64 stream, so consuming extra samples from
    one stream never shifts another. The same name returns the same stream
    object, making consumption order (and thus whole runs) reproducible.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            key = zlib.crc32(name.encode("utf-8"))
            seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(key,))
            self._streams[name] = np.random.Generator(np.random.PCG64(seq))
        return self._streams[name]


def seed_everything(seed: int) -> SeedStreams:
    """Entry point for run-level seeding; returns the stream registry."""
    return SeedStreams(seed)
