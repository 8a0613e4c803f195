"""Checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"XLTCKPT\\0"
    bytes 8..11   uint32 format version (currently 1)
    bytes 12..19  uint64 header length H
    bytes 20..    UTF-8 JSON header of H bytes:
                  {"version": 1, "config": {...},
                   "tensors": [{"name", "shape", "offset", "count"}, ...]}
    payload       concatenated little-endian float64 values; ``offset`` is
                  the byte offset of a tensor relative to the payload start
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"XLTCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], config: dict[str, Any]) -> None:
    entries = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size * 8
    header = json.dumps(
        {"version": FORMAT_VERSION, "config": config, "tensors": entries}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for name in sorted(tensors):
            fh.write(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack_from("<IQ", raw, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = 20
    header = json.loads(raw[start : start + header_len].decode("utf-8"))
    payload = start + header_len
    tensors = {}
    for entry in header["tensors"]:
        lo = payload + entry["offset"]
        if lo + 8 * entry["count"] > len(raw):
            raise CheckpointError(f"{path}: truncated payload for {entry['name']!r}")
        values = np.frombuffer(raw, dtype="<f8", count=entry["count"], offset=lo)
        tensors[entry["name"]] = values.reshape(entry["shape"]).astype(np.float64)
    return tensors, header["config"]
