"""Deterministic named-tensor checkpoints.

Format: 8-byte magic, 8-byte little-endian header length, UTF-8 JSON header,
then raw little-endian tensor bytes in name-sorted order. No timestamps, no
zip container: byte-for-byte reproducibility is part of the training contract.
Writes go through a temp file in the same directory plus rename, so a crash
mid-write never leaves a half-written checkpoint under the final name.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

MAGIC = b"TENSORS1"

_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8"}

# indirection point so tests can inject crashes between write and rename
_replace = os.replace


def write_bytes_atomic(path: str | Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        _replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def serialize_tensors(tensors: Mapping[str, torch.Tensor], metadata: Mapping[str, Any]) -> bytes:
    entries = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported tensor dtype {dtype} for {name!r}")
        raw = np.ascontiguousarray(arr).astype(_DTYPES[dtype]).tobytes()
        entries.append(
            {"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": len(payload), "nbytes": len(raw)}
        )
        payload.extend(raw)
    header = json.dumps({"meta": dict(metadata), "tensors": entries}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + bytes(payload)


def deserialize_tensors(blob: bytes) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError("not a tensor checkpoint (bad magic)")
    (header_len,) = struct.unpack("<Q", blob[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(blob[start : start + header_len].decode("utf-8"))
    body = blob[start + header_len :]
    tensors: dict[str, torch.Tensor] = {}
    for e in header["tensors"]:
        raw = body[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).astype(e["dtype"])
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return tensors, header["meta"]


def save_checkpoint(path: str | Path, tensors: Mapping[str, torch.Tensor], metadata: Mapping[str, Any]) -> str:
    """Write atomically; returns the content hash (also usable as a version id)."""
    blob = serialize_tensors(tensors, metadata)
    write_bytes_atomic(path, blob)
    return hashlib.sha256(blob).hexdigest()[:16]


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any], str]:
    blob = Path(path).read_bytes()
    tensors, meta = deserialize_tensors(blob)
    return tensors, meta, hashlib.sha256(blob).hexdigest()[:16]
