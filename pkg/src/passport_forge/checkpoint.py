"""Named-tensor binary container and the model checkpoint built on it.

Layout (all integers little-endian u32): a 5-byte magic, the entry count,
then per entry a length-prefixed UTF-8 name, the rank, the dims and the
raw float32 data; a trailing length-prefixed JSON blob carries metadata.
Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC_CHECKPOINT = b"PSPT1"
MAGIC_PASSPORT = b"PSPP1"
MAGIC_WATERMARK_KEY = b"WMKY1"

_U32 = struct.Struct("<I")


class FormatError(ValueError):
    """Malformed or mismatched container bytes."""


def write_tensor_blob(magic: bytes, tensors: Mapping[str, np.ndarray], metadata: dict) -> bytes:
    if len(magic) != 5:
        raise ValueError(f"magic must be 5 bytes, got {magic!r}")
    parts = [magic, _U32.pack(len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(arr.ndim))
        for dim in arr.shape:
            parts.append(_U32.pack(dim))
        parts.append(arr.tobytes())
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(_U32.pack(len(meta)))
    parts.append(meta)
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("truncated container")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def read_tensor_blob(blob: bytes, magic: bytes) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    reader = _Reader(blob)
    got = reader.take(5)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    count = reader.u32()
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        if rank > 8:
            raise FormatError(f"implausible tensor rank {rank} for '{name}'")
        shape = tuple(reader.u32() for _ in range(rank))
        n_elem = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(4 * n_elem), dtype="<f4").reshape(shape)
        if name in tensors:
            raise FormatError(f"duplicate tensor name '{name}'")
        tensors[name] = data.copy()
    meta = json.loads(reader.take(reader.u32()).decode("utf-8"))
    if reader.pos != len(blob):
        raise FormatError(f"{len(blob) - reader.pos} trailing bytes after metadata")
    return tensors, meta


@dataclass
class Checkpoint:
    """Attacker-visible model state: weights, plain affine params, norm stats.

    Passports and passport-derived affine factors are never stored here.
    """

    tensors: "OrderedDict[str, np.ndarray]"
    spec_hash: str
    seed: int = 0
    epoch: int = 0
    extra: dict = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.tensors)

    def to_bytes(self) -> bytes:
        meta = {"spec_hash": self.spec_hash, "seed": self.seed, "epoch": self.epoch}
        meta.update(self.extra)
        return write_tensor_blob(MAGIC_CHECKPOINT, self.tensors, meta)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        tensors, meta = read_tensor_blob(blob, MAGIC_CHECKPOINT)
        try:
            spec_hash = meta.pop("spec_hash")
            seed = int(meta.pop("seed"))
            epoch = int(meta.pop("epoch"))
        except KeyError as exc:
            raise FormatError(f"checkpoint metadata missing field {exc}") from exc
        return cls(tensors=tensors, spec_hash=spec_hash, seed=seed, epoch=epoch, extra=meta)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
