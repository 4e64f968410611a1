"""Binary checkpoint format.

Layout (all integers little-endian uint32)::

    b"MTBD" | version | len(config) | config (UTF-8 JSON, sorted keys)
    | n_tensors | { len(name) | name | rank | extents... | float64 LE data }*

Tensors are written in sorted name order, so equal models give equal bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MTBD"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        blob = json.dumps(self.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
        out = [MAGIC, struct.pack("<II", self.version, len(blob)), blob, struct.pack("<I", len(self.tensors))]
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f8")
            nb = name.encode("utf-8")
            out.append(struct.pack("<I", len(nb)) + nb)
            out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            out.append(arr.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> Checkpoint:
        reader = _Reader(buf)
        if reader.take(4) != MAGIC:
            raise CheckpointFormatError("bad magic: not an MTBD checkpoint")
        version = reader.u32()
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
        try:
            config = json.loads(reader.take(reader.u32()).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise CheckpointFormatError("corrupt config blob") from None
        tensors = {}
        for _ in range(reader.u32()):
            name = reader.take(reader.u32()).decode("utf-8", errors="strict")
            rank = reader.u32()
            shape = tuple(reader.u32() for _ in range(rank))
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(reader.take(8 * count), dtype="<f8").astype(np.float64)
            tensors[name] = data.reshape(shape)
        if reader.pos != len(buf):
            raise CheckpointFormatError(f"{len(buf) - reader.pos} trailing bytes after tensor table")
        return cls(config, tensors, version)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        return cls.from_bytes(Path(path).read_bytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    ckpt.save(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return Checkpoint.load(path)
