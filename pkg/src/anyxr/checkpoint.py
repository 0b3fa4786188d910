"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"ADXR" | u16 version | u32 header length | header JSON | tensor data | u32 CRC-32

The header lists every tensor as ``{"name", "shape", "offset"}`` into the
data block, which holds contiguous little-endian float32 values. The CRC
covers header and data, so truncation and bit flips are both detected.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError, CheckpointVersionError

MAGIC = b"ADXR"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_CRC = struct.Struct("<I")


def checkpoint_save(tensors: dict[str, np.ndarray], path, meta: dict | None = None) -> None:
    table, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = dict(meta or {})
    header["tensors"] = table
    header["data_bytes"] = offset
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = head + b"".join(chunks)
    blob = _PREFIX.pack(MAGIC, VERSION, len(head)) + body + _CRC.pack(zlib.crc32(body))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def checkpoint_load(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, meta)``; nothing is returned unless the whole file checks out."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < _PREFIX.size + _CRC.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, head_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {VERSION}")
    body = blob[_PREFIX.size:-_CRC.size]
    if len(body) < head_len:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(body[:head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    data = body[head_len:]
    if len(data) != header.get("data_bytes"):
        raise CheckpointError(f"{path}: truncated tensor data ({len(data)} of {header.get('data_bytes')} bytes)")
    (crc,) = _CRC.unpack_from(blob, len(blob) - _CRC.size)
    if crc != zlib.crc32(body):
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    tensors = {}
    for entry in header.pop("tensors"):
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.astype(np.float32).reshape(entry["shape"])
    header.pop("data_bytes")
    return tensors, header
