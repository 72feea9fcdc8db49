"""Binary checkpoint format.

All integers are little-endian unsigned 32-bit::

    magic      8 bytes   b"SFCNCKPT"
    version    u32       1
    config     u32 length + UTF-8 JSON (sorted keys): {"model": {...}, "meta": {...}}
    count      u32       number of records
    record     u32 name length, name bytes (UTF-8), u32 rank, rank x u32 dims,
               prod(dims) float64 little-endian values (row-major)

Learnable tensors are stored under their layer names; batch-norm running
statistics use the prefix ``buffer:``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .model import ModelConfig, Parameters

MAGIC = b"SFCNCKPT"
VERSION = 1
BUFFER_PREFIX = "buffer:"


class CheckpointError(ValueError):
    pass


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def _record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    parts = [_u32(len(raw)), raw, _u32(arr.ndim)]
    parts += [_u32(d) for d in arr.shape]
    parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def dumps(params: Parameters, meta: dict | None = None) -> bytes:
    header = json.dumps({"model": params.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode("utf-8")
    records = [_record(n, t.data) for n, t in params.tensors.items()]
    records += [_record(BUFFER_PREFIX + n, b) for n, b in params.buffers.items()]
    return b"".join([MAGIC, _u32(VERSION), _u32(len(header)), header, _u32(len(records))] + records)


def save(path, params: Parameters, meta: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(dumps(params, meta))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def loads(buf: bytes):
    """Return ``(Parameters, meta)`` from checkpoint bytes."""
    r = _Reader(buf)
    if r.take(8) != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(r.take(r.u32()).decode("utf-8"))
    config = ModelConfig(**header["model"])
    tensors, buffers = {}, {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        dims = tuple(r.u32() for _ in range(r.u32()))
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        if name.startswith(BUFFER_PREFIX):
            buffers[name[len(BUFFER_PREFIX):]] = arr
        else:
            tensors[name] = Tensor(arr, requires_grad=True)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after last record")
    return Parameters(config=config, tensors=tensors, buffers=buffers), header.get("meta", {})


def load(path):
    return loads(Path(path).read_bytes())


def check_compatible(params: Parameters, expected: Parameters) -> None:
    """Raise if names or shapes differ, reporting both shapes."""
    for name, t in expected.tensors.items():
        if name not in params.tensors:
            raise CheckpointError(f"checkpoint lacks parameter {name!r} (config expects shape {t.shape})")
        got = params.tensors[name].shape
        if got != t.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: checkpoint {got} vs config {t.shape}")
    extra = set(params.tensors) - set(expected.tensors)
    if extra:
        raise CheckpointError(f"checkpoint has parameters the config does not: {sorted(extra)[:5]}")
