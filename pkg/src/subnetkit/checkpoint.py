"""Checkpoint container: JSON header followed by a little-endian raw buffer.

Layout: 8-byte little-endian header length, UTF-8 JSON header, then tensor
bytes in header order (names sorted). All writes go through a temp file and
``os.replace`` so a crash never leaves a truncated file under the final name.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

FORMAT = "subnetkit-checkpoint"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        dt = a.dtype.name
        if dt not in _DTYPES:
            raise TypeError(f"{name}: unsupported dtype {dt}")
        raw = np.ascontiguousarray(a, dtype=_DTYPES[dt]).tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": dt, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format": FORMAT, "version": VERSION, "meta": meta or {}, "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 8:
        raise ValueError("checkpoint truncated: missing header length")
    (hlen,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    if header.get("format") != FORMAT:
        raise ValueError(f"not a {FORMAT} file")
    if header.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    base = 8 + hlen
    arrays = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        buf = blob[start : start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise ValueError(f"checkpoint truncated inside tensor {e['name']}")
        arrays[e["name"]] = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).astype(e["dtype"])
    return arrays, header["meta"]


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write atomically; returns the sha256 of the file contents."""
    blob = encode(arrays, meta)
    atomic_write_bytes(path, blob)
    return hashlib.sha256(blob).hexdigest()


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
