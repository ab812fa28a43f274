"""Binary container for checkpoints and featurised datasets.

Layout (all integers little-endian u32)::

    b"CMI1" | version | len(meta) | meta (UTF-8 JSON) | n_tensors |
    n_tensors x ( len(name) | name (UTF-8) | ndim | dims... | float32 data )

Tensor data is row-major little-endian float32. The JSON blob is written
with sorted keys so identical content gives identical bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagic, CheckpointError, TruncatedFile, VersionMismatch

MAGIC = b"CMI1"
VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config(self) -> dict:
        return self.meta.get("config", {})

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    @property
    def rng_state(self) -> dict:
        return self.meta.get("rng", {})


def to_bytes(ckpt: Checkpoint, version: int = VERSION) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, _U32.pack(version), _U32.pack(len(meta)), meta, _U32.pack(len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        parts += [_U32.pack(len(raw_name)), raw_name, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFile(f"file ends inside {what} (need {n} bytes at offset {self.pos}, "
                                f"have {len(self.buf) - self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = buf[:4]
    if len(magic) < 4:
        if MAGIC.startswith(magic):
            raise TruncatedFile("file ends inside magic bytes")
        raise BadMagic(f"bad magic {magic!r}")
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}, expected {MAGIC!r}")
    r.pos = 4
    version = r.u32("version")
    if version != VERSION:
        raise VersionMismatch(f"format version {version}, this build reads {VERSION}")
    meta_len = r.u32("metadata length")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata: {exc}") from None
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8", errors="strict")
        ndim = r.u32(f"{name} rank")
        shape = tuple(r.u32(f"{name} dims") for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(4 * count, f"{name} data"), dtype="<f4").reshape(shape)
        tensors[name] = data.astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return Checkpoint(meta, tensors)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
