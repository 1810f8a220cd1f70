"""Flat binary checkpoint files.

Layout: an 8-byte magic, a little-endian uint64 header length, a canonical
JSON header (version stamp, free-form metadata, array directory with
names/shapes/dtypes/offsets), then the raw array bytes concatenated in
name order. Every byte is a pure function of the contents, so
save -> load -> save reproduces the file exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"STVLPCK1"
VERSION = 1


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> None:
    names = sorted(arrays)
    directory = []
    offset = 0
    blobs: list[bytes] = []
    for name in names:
        arr = np.asarray(arrays[name])
        blob = arr.tobytes()  # C-order serialization regardless of input layout
        directory.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.str,
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        offset += len(blob)
        blobs.append(blob)
    header = {"version": VERSION, "meta": meta, "arrays": directory}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    header_start = len(MAGIC) + 8
    header = json.loads(data[header_start : header_start + header_len].decode("utf-8"))
    if header.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    payload_start = header_start + header_len
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        start = payload_start + entry["offset"]
        blob = data[start : start + entry["nbytes"]]
        arr = np.frombuffer(blob, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()  # own the memory, drop the file buffer
    return header["meta"], arrays
