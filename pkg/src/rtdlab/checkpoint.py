"""Versioned named-array container.

Layout: a UTF-8 text manifest followed by raw little-endian arrays::

    RTDLAB-CHECKPOINT 1
    meta {"step": 10, ...}
    array <name> <dtype> <shape> <offset> <nbytes>
    ...
    payload <total bytes> <sha256 hex>
    end
    <payload bytes>

``shape`` is ``x``-joined (``-`` for a scalar). Offsets are relative to the
start of the payload. Writes go to a temporary file that is renamed into
place, so a reader never sees a half-written checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

MAGIC = "RTDLAB-CHECKPOINT"
VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


class CheckpointError(RuntimeError):
    pass


def _dtype_code(dt: np.dtype) -> str:
    for code, ref in _DTYPES.items():
        if dt == ref or dt == ref.newbyteorder("="):
            return code
    raise CheckpointError(f"unsupported dtype {dt}")


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    lines = [f"{MAGIC} {VERSION}", "meta " + json.dumps(meta or {}, sort_keys=True)]
    chunks, offset = [], 0
    for name, arr in arrays.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"array name {name!r} contains whitespace")
        code = _dtype_code(arr.dtype)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        shape = "x".join(str(d) for d in arr.shape) or "-"
        lines.append(f"array {name} {code} {shape} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    lines.append(f"payload {len(payload)} {hashlib.sha256(payload).hexdigest()}")
    lines.append("end")
    blob = ("\n".join(lines) + "\n").encode("utf-8") + payload

    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Parse and verify the whole file before returning anything."""
    data = Path(path).read_bytes()
    end = data.find(b"\nend\n")
    if end < 0:
        raise CheckpointError(f"{path}: missing manifest terminator (truncated or not a checkpoint)")
    try:
        header = data[:end].decode("utf-8").split("\n")
    except UnicodeDecodeError as e:
        raise CheckpointError(f"{path}: corrupted manifest") from e
    payload = data[end + len(b"\nend\n"):]

    first = header[0].split(" ")
    if len(first) != 2 or first[0] != MAGIC:
        raise CheckpointError(f"{path}: bad magic line {header[0]!r}")
    if first[1] != str(VERSION):
        raise CheckpointError(f"{path}: checkpoint version {first[1]} unsupported (expected {VERSION})")
    try:
        if not header[1].startswith("meta "):
            raise ValueError("meta line missing")
        meta = json.loads(header[1][5:])
        entries = []
        for line in header[2:-1]:
            tag, name, code, shape, off, nb = line.split(" ")
            if tag != "array":
                raise ValueError(f"unexpected manifest line {line!r}")
            dims = () if shape == "-" else tuple(int(s) for s in shape.split("x"))
            entries.append((name, _DTYPES[code], dims, int(off), int(nb)))
        tag, total, digest = header[-1].split(" ")
        if tag != "payload":
            raise ValueError("payload line missing")
        total = int(total)
    except (ValueError, KeyError, IndexError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupted manifest: {e}") from e

    if len(payload) != total:
        raise CheckpointError(f"{path}: truncated payload ({len(payload)} of {total} bytes)")
    if hashlib.sha256(payload).hexdigest() != digest:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    arrays = {}
    for name, dt, dims, off, nb in entries:
        if off + nb > total or nb != dt.itemsize * int(np.prod(dims, dtype=np.int64)):
            raise CheckpointError(f"{path}: array {name} extent is inconsistent")
        arrays[name] = np.frombuffer(payload, dtype=dt, count=nb // dt.itemsize, offset=off).reshape(dims).copy()
    return arrays, meta
