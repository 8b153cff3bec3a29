"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"PFCKPT\\0\\0"  u32 version
    u32 n, config echo (utf-8 ``key = value`` text)
    u64 step
    u32 n, RNG state (utf-8 JSON)
    u32 tensor count
    per tensor, sorted by name:
        u16 n, name (utf-8)   2 bytes dtype ("f4" | "f8")   u8 ndim   u32 x ndim shape
        payload, little-endian, C order

Names are prefixed ``param/``, ``buffer/`` and ``optim/{m,v}/``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PFCKPT\0\0"
VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config_text: str = ""
    step: int = 0
    rng_state: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _code(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f4"
    if arr.dtype == np.float64:
        return "f8"
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = ckpt.config_text.encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<Q", ckpt.step))
    rng = json.dumps(ckpt.rng_state, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(rng)))
    buf.write(rng)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        code = _code(arr)
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(code.encode("ascii"))
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def from_bytes(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = bytes(view[pos:pos + n])
        pos += n
        return out

    if take(8) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", take(4))
    config_text = take(n).decode("utf-8")
    (step,) = struct.unpack("<Q", take(8))
    (n,) = struct.unpack("<I", take(4))
    rng_state = json.loads(take(n).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        code = take(2).decode("ascii")
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code!r}")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return Checkpoint(tensors, config_text, step, rng_state)


def save(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
