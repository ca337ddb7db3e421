"""Versioned little-endian binary checkpoints.

Layout::

    8 bytes   magic  b"SMASHCKP"
    u32       format version
    u64       header length, then that many bytes of UTF-8 JSON
              (config snapshot, step, RNG state, metadata, tensor count)
    per tensor:
      u16 name length, name bytes (UTF-8)
      u8  dtype code, u8 ndim, ndim x u64 dims
      raw little-endian element data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SMASHCKP"
VERSION = 1

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1"), 5: np.dtype("<u8")}


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTensorCountError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    step: int = 0
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if (self.config, self.step, self.rng_state, self.meta) != (other.config, other.step, other.rng_state, other.meta):
            return False
        if list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def _code(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in "|" else arr.dtype
    for code, known in _DTYPES.items():
        if dt == known:
            return code
    raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {
        "config": ckpt.config,
        "step": int(ckpt.step),
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "tensor_count": len(ckpt.tensors),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(blob)), blob]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        code = _code(arr)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointTensorCountError("checkpoint ends early: fewer tensors than the header declares")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointMagicError(f"{path}: not a checkpoint (bad magic)")
    r = _Reader(raw)
    r.take(8)
    version, hlen = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint format version {version}, this build reads {VERSION}")
    header = json.loads(r.take(hlen).decode("utf-8"))
    tensors = {}
    for _ in range(header["tensor_count"]):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for tensor {name!r}")
        dims = r.unpack(f"<{ndim}Q")
        dt = _DTYPES[code]
        count = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = data.astype(dt.newbyteorder("="), copy=True)
    if r.pos != len(raw):
        raise CheckpointTensorCountError(f"{path}: trailing data after {header['tensor_count']} tensors")
    return Checkpoint(tensors, header["config"], header["step"], header["rng_state"], header["meta"])
