"""Binary weight-file format.

Layout, all integers unsigned 64-bit little-endian::

    b"OPWT"  version:u8
    len:u64 architecture-name (UTF-8)
    len:u64 provenance (UTF-8)
    count:u64
    count x { len:u64 path (UTF-8), rank:u64, rank x extent:u64,
              prod(extents) x float32 little-endian }
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import BinaryIO, Dict

import numpy as np

MAGIC = b"OPWT"
VERSION = 1
PROVENANCES = ("random", "external-file", "byol")

_U64 = struct.Struct("<Q")


class WeightFileError(ValueError):
    pass


@dataclass
class ModelWeights:
    architecture: str
    provenance: str
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.architecture, self.provenance,
                            OrderedDict((k, v.copy()) for k, v in self.tensors.items()))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelWeights):
            return NotImplemented
        return (self.architecture == other.architecture
                and self.provenance == other.provenance
                and list(self.tensors) == list(other.tensors)
                and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors))


def _write_str(buf: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(_U64.pack(len(raw)))
    buf.write(raw)


def to_bytes(weights: ModelWeights) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<B", VERSION))
    _write_str(buf, weights.architecture)
    _write_str(buf, weights.provenance)
    buf.write(_U64.pack(len(weights.tensors)))
    for path, arr in weights.tensors.items():
        arr = np.asarray(arr)
        _write_str(buf, path)
        buf.write(_U64.pack(arr.ndim))
        for n in arr.shape:
            buf.write(_U64.pack(n))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightFileError(f"truncated weight file at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def string(self) -> str:
        try:
            return self.take(self.u64()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFileError(f"invalid UTF-8 string near byte {self.pos}") from exc


def from_bytes(data: bytes) -> ModelWeights:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise WeightFileError("not a weight file (bad magic)")
    version = r.take(1)[0]
    if version != VERSION:
        raise WeightFileError(f"unsupported weight-file version {version}")
    arch = r.string()
    provenance = r.string()
    count = r.u64()
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        path = r.string()
        rank = r.u64()
        shape = tuple(r.u64() for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
        if path in tensors:
            raise WeightFileError(f"duplicate path {path!r}")
        tensors[path] = arr
    if r.pos != len(data):
        raise WeightFileError(f"{len(data) - r.pos} trailing bytes after last tensor")
    return ModelWeights(arch, provenance, tensors)


def atomic_write_bytes(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_weights(weights: ModelWeights, path: str) -> None:
    atomic_write_bytes(path, to_bytes(weights))


def load_weights(path: str) -> ModelWeights:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def state_to_weights(state: Dict[str, np.ndarray], architecture: str,
                     provenance: str) -> ModelWeights:
    return ModelWeights(architecture, provenance,
                        OrderedDict((k, np.array(v, dtype=np.float32)) for k, v in state.items()))
