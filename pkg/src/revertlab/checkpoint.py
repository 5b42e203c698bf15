"""Self-describing parameter container.

Layout: ``b"RLCK"`` | u16 version | u32 header length | UTF-8 JSON header |
tensor payloads.  The header holds the model config, free-form metadata and
one ``{name, shape, offset}`` entry per tensor; payloads are row-major
little-endian float32.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"RLCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    pass


def write_container(
    path: str | Path,
    kind: str,
    config: Mapping[str, Any],
    tensors: Mapping[str, np.ndarray],
    meta: Mapping[str, Any] | None = None,
) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"kind": kind, "config": dict(config), "meta": dict(meta or {}), "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, tensors)``; raises CheckpointError on malformed files."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[_PREFIX.size : _PREFIX.size + hlen].decode("utf-8"))
    base = _PREFIX.size + hlen
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        buf = raw[start : start + 4 * count]
        if len(buf) != 4 * count:
            raise CheckpointError(f"truncated tensor {e['name']}")
        tensors[e["name"]] = np.frombuffer(buf, dtype="<f4").reshape(e["shape"]).copy()
    return header, tensors
