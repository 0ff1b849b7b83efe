"""Binary tensor container used by world files and model checkpoints.

Layout, all little-endian:

    magic     4 bytes ASCII
    version   u32
    meta_len  u32
    meta      UTF-8 JSON of length meta_len
    payload   float64 tensors, concatenated in the order listed in meta

The JSON block holds ``config`` (a flat dict of scalars), a ``tensors`` list
of ``{"name", "shape", "kind"}`` entries, and an optional ``extra`` dict.
Integer tensors are stored as float64 (``kind: "int"``) and cast back on
load, so the payload is uniform and the round trip is bit-exact for every
value this package produces.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Any

import numpy as np

from .errors import FormatError

_HEADER = struct.Struct("<4sII")


def pack(magic: bytes, version: int, config: dict[str, Any],
         tensors: dict[str, np.ndarray], extra: dict[str, Any] | None = None) -> bytes:
    if len(magic) != 4:
        raise FormatError(f"magic must be 4 bytes, got {magic!r}")
    entries = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if np.issubdtype(arr.dtype, np.integer):
            kind = "int"
        elif np.issubdtype(arr.dtype, np.floating):
            kind = "float"
        else:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        entries.append({"name": name, "shape": list(arr.shape), "kind": kind})
        blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    meta = json.dumps(
        {"config": config, "tensors": entries, "extra": extra or {}},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    return _HEADER.pack(magic, version, len(meta)) + meta + b"".join(blobs)


def unpack(data: bytes, magic: bytes, version: int
           ) -> tuple[dict[str, Any], dict[str, np.ndarray], dict[str, Any]]:
    if len(data) < _HEADER.size:
        raise FormatError("container truncated before header")
    got_magic, got_version, meta_len = _HEADER.unpack_from(data, 0)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise FormatError(f"unsupported version {got_version}, expected {version}")
    off = _HEADER.size
    if len(data) < off + meta_len:
        raise FormatError("container truncated inside metadata")
    try:
        meta = json.loads(data[off:off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"metadata is not valid JSON: {e}") from e
    off += meta_len
    tensors: dict[str, np.ndarray] = {}
    for entry in meta.get("tensors", []):
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = 8 * n
        if len(data) < off + nbytes:
            raise FormatError(f"container truncated inside tensor {entry['name']!r}")
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
        if entry.get("kind") == "int":
            arr = arr.astype(np.int64)
        else:
            arr = arr.astype(np.float64)
        tensors[entry["name"]] = arr
        off += nbytes
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after payload")
    return meta.get("config", {}), tensors, meta.get("extra", {})


def write_file(path: str, magic: bytes, version: int, config: dict[str, Any],
               tensors: dict[str, np.ndarray], extra: dict[str, Any] | None = None) -> None:
    data = pack(magic, version, config, tensors, extra)
    with open(path, "wb") as f:
        f.write(data)


def read_file(path: str, magic: bytes, version: int
              ) -> tuple[dict[str, Any], dict[str, np.ndarray], dict[str, Any]]:
    with open(path, "rb") as f:
        data = f.read()
    return unpack(data, magic, version)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
