"""Versioned binary weight files.

Layout (little-endian)::

    magic  b"CSWT"
    u32    version
    u32    entry count
    entries: u16 name length, utf-8 name, u32 ndim, u32 dims..., f32 data
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from .layers import Module

MAGIC = b"CSWT"
VERSION = 1


class WeightFormatError(ValueError):
    pass


def encode_weights(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_weights(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 12 or data[:4] != MAGIC:
        raise WeightFormatError("not a weight file (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise WeightFormatError(f"unsupported weight file version {version} (expected {VERSION})")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            if pos + n > len(data):
                raise WeightFormatError("truncated weight file")
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(data):
                raise WeightFormatError(f"truncated weight file in entry {name!r}")
            out[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
            pos += nbytes
    except struct.error as exc:
        raise WeightFormatError(f"truncated weight file ({exc})") from exc
    if pos != len(data):
        raise WeightFormatError(f"{len(data) - pos} trailing bytes after last entry")
    return out


def save_weights(model: Module, extra: Mapping[str, np.ndarray] | None = None) -> bytes:
    entries = dict(model.state())
    if extra:
        entries.update(extra)
    return encode_weights(entries)


def load_weights(model: Module, data: bytes | Mapping[str, np.ndarray], strict: bool = True) -> dict[str, np.ndarray]:
    """Copy stored arrays into ``model`` in place; returns entries the model does not own."""
    entries = decode_weights(data) if isinstance(data, (bytes, bytearray)) else dict(data)
    state = model.state()
    for name, target in state.items():
        if name not in entries:
            if strict:
                raise WeightFormatError(f"missing entry for layer {name!r}")
            continue
        src = entries[name]
        if src.shape != target.shape:
            raise WeightFormatError(f"shape mismatch for layer {name!r}: file {src.shape}, model {target.shape}")
        target[...] = src
    return {k: v for k, v in entries.items() if k not in state}
