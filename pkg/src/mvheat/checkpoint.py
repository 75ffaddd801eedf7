"""Flat binary parameter checkpoints.

Layout (little-endian): ``b"HMOE"``, ``u32`` version, ``u32`` record count,
then per parameter ``u16`` name length, UTF-8 name, ``u8`` rank, ``u32``
extents and the values as 32-bit floats in row-major order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .nn import Module

__all__ = ["CHECKPOINT_VERSION", "CheckpointError", "ArchitectureMismatch", "save_checkpoint", "read_checkpoint",
           "load_checkpoint"]

MAGIC = b"HMOE"
CHECKPOINT_VERSION = 1
_HEAD = struct.Struct("<4sII")


class CheckpointError(ValueError):
    """The checkpoint file is malformed."""


class ArchitectureMismatch(ValueError):
    """Checkpoint parameters do not match the model; ``diff`` lists each discrepancy."""

    def __init__(self, diff: list):
        self.diff = diff
        lines = "\n  ".join(diff[:20]) + ("\n  ..." if len(diff) > 20 else "")
        super().__init__(f"checkpoint does not match the model architecture:\n  {lines}")


def save_checkpoint(model: Module | dict, path) -> None:
    params = model if isinstance(model, dict) else model.named_parameters()
    chunks = [_HEAD.pack(MAGIC, CHECKPOINT_VERSION, len(params))]
    for name, p in params.items():
        data = np.asarray(p.data if hasattr(p, "data") else p, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(np.ascontiguousarray(data).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> dict:
    """Parse a checkpoint into ``{name: float32 array}`` in file order."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEAD.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, count = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = _HEAD.size
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if off + size > len(blob):
                raise CheckpointError(f"{path}: record {name!r} runs past end of file at offset {off}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=off).reshape(shape).copy()
            off += size
    except struct.error:
        raise CheckpointError(f"{path}: truncated record at offset {off}") from None
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes at offset {off}")
    return out


def load_checkpoint(model: Module, path) -> None:
    """Copy checkpoint values into ``model``, refusing any name or shape mismatch."""
    stored = read_checkpoint(path)
    params = model.named_parameters()
    diff = []
    for name, p in params.items():
        if name not in stored:
            diff.append(f"missing {name} {list(p.shape)}")
        elif tuple(stored[name].shape) != tuple(p.shape):
            diff.append(f"shape {name}: checkpoint {list(stored[name].shape)} vs model {list(p.shape)}")
    for name, v in stored.items():
        if name not in params:
            diff.append(f"unexpected {name} {list(v.shape)}")
    if diff:
        raise ArchitectureMismatch(diff)
    for name, p in params.items():
        p.data[...] = stored[name].astype(p.data.dtype)
