"""Minimal binary PGM (P5) image I/O.

8-bit grayscale only. Written bytes are a pure function of the pixel
array, so corpora serialize reproducibly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAXVAL = 255


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write a float array with values in [0, 1] as an 8-bit binary PGM."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected 2-d image, got shape {arr.shape}")
    if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
        raise ValueError("pixel values must lie in [0, 1]")
    quant = np.clip(np.rint(arr * MAXVAL), 0, MAXVAL).astype(np.uint8)
    h, w = quant.shape
    header = f"P5\n{w} {h}\n{MAXVAL}\n".encode("ascii")
    Path(path).write_bytes(header + quant.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM into a float64 array scaled to [0, 1]."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (missing P5 magic)")
    # Header is three whitespace-separated fields after the magic; comment
    # lines starting with '#' may appear between fields.
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != MAXVAL:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    payload = data[pos : pos + w * h]
    if len(payload) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.float64) / MAXVAL
