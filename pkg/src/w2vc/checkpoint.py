"""Versioned, little-endian, field-tagged binary container.

Layout: 4-byte magic, u32 version, u32 record count, then per record
``u16 tag_len | tag (utf-8) | u8 kind | u8 ndim | u32 dims[ndim] | u64 nbytes | payload``.
Kinds: 0 float64 array, 1 int64 array, 2 utf-8 JSON text.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"W2VC"
ENCODER_MAGIC = b"W2VE"
VERSION = 1

_F64, _I64, _JSON = 0, 1, 2


class CheckpointError(ValueError):
    pass


def write_container(path, magic: bytes, records: dict) -> None:
    """``records`` maps tag -> ndarray (float or int) or JSON-serialisable object."""
    chunks = [struct.pack("<4sII", magic, VERSION, len(records))]
    for tag, value in records.items():
        t = tag.encode()
        if isinstance(value, np.ndarray):
            if np.issubdtype(value.dtype, np.integer):
                kind, arr = _I64, value.astype("<i8")
            else:
                kind, arr = _F64, value.astype("<f8")
            payload = np.ascontiguousarray(arr).tobytes()
            dims = arr.shape
        else:
            kind, payload, dims = _JSON, json.dumps(value, sort_keys=True).encode(), ()
        chunks.append(struct.pack("<H", len(t)) + t)
        chunks.append(struct.pack(f"<BB{len(dims)}I", kind, len(dims), *dims))
        chunks.append(struct.pack("<Q", len(payload)) + payload)
    Path(path).write_bytes(b"".join(chunks))


def read_container(path, magic: bytes) -> dict:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != magic:
        raise CheckpointError(f"{path}: bad magic, expected {magic!r}")
    _, version, count = struct.unpack_from("<4sII", blob)
    if version != VERSION:
        raise CheckpointError(f"{path}: version {version}, expected {VERSION}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, off)
            off += 2
            tag = blob[off:off + n].decode()
            off += n
            kind, ndim = struct.unpack_from("<BB", blob, off)
            off += 2
            dims = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            (nbytes,) = struct.unpack_from("<Q", blob, off)
            off += 8
            payload = blob[off:off + nbytes]
            if len(payload) != nbytes:
                raise CheckpointError(f"{path}: record {tag!r} truncated")
            off += nbytes
            if kind == _JSON:
                out[tag] = json.loads(payload.decode())
            elif kind in (_F64, _I64):
                dt = "<f8" if kind == _F64 else "<i8"
                out[tag] = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
            else:
                raise CheckpointError(f"{path}: unknown record kind {kind}")
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated container") from exc
    return out
