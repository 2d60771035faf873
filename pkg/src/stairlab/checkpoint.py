"""Single-file, versioned checkpoints.

Layout (all integers little-endian)::

    b"STAIRCKP"  u32 format_version  u64 header_len  header (UTF-8 JSON)
    raw tensor bytes, concatenated in header order
    32-byte SHA-256 of everything above

The header lists every array with its name, shape, dtype (numpy ``<f4``,
``<f8``, ``|u1``...) and byte offset into the data section, plus arbitrary
JSON metadata (configs, step, optimizer scalars).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"STAIRCKP"
FORMAT_VERSION = 1


def dumps(arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(data) < len(MAGIC) + 12 + 32 or not data.startswith(MAGIC):
        raise CheckpointError("not a stairlab checkpoint")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + 12
    header = json.loads(body[start:start + hlen])
    data_start = start + hlen
    arrays = {}
    for e in header["tensors"]:
        dtype = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=data_start + e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return arrays, header["meta"]


def save(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(arrays, meta))
    tmp.replace(path)
    return path


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes())
