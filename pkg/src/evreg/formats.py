"""Binary file codecs shared across the pipeline: FLT1 tensors and P5 PGM images."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FLT1_MAGIC = b"FLT1"


def write_flt1(path, arr: np.ndarray) -> None:
    """Write (H,W,C) float data as little-endian float32, row-major."""
    a = np.asarray(arr)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"FLT1 expects (H,W,C), got shape {a.shape}")
    h, w, c = a.shape
    with open(path, "wb") as f:
        f.write(FLT1_MAGIC)
        f.write(struct.pack("<III", h, w, c))
        f.write(a.astype("<f4").tobytes())


def read_flt1(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FLT1_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r} at byte 0, expected FLT1")
    h, w, c = struct.unpack_from("<III", raw, 4)
    body = np.frombuffer(raw, dtype="<f4", offset=16)
    if body.size != h * w * c:
        raise ValueError(f"{path}: payload holds {body.size} floats, header says {h * w * c}")
    return body.reshape(h, w, c).astype(np.float64)


def write_pgm(path, arr: np.ndarray, comment: str | None = None) -> None:
    """Write a P5 PGM with maxval 255; values are clipped and rounded."""
    a = np.asarray(arr)
    if a.ndim != 2:
        raise ValueError("PGM expects a 2-D array")
    data = np.clip(np.rint(a), 0, 255).astype(np.uint8)
    h, w = data.shape
    header = b"P5\n"
    if comment:
        header += b"# " + comment.encode("utf-8") + b"\n"
    header += f"{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header + data.tobytes())


def read_pgm(path) -> tuple[np.ndarray, list[str]]:
    """Read a P5 PGM; returns the image and any header comment lines."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a P5 PGM")
    pos = 2
    fields: list[bytes] = []
    comments: list[str] = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            end = raw.index(b"\n", pos)
            comments.append(raw[pos + 1:end].decode("utf-8").strip())
            pos = end + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    img = np.frombuffer(raw, dtype=np.uint8, offset=pos, count=h * w)
    return img.reshape(h, w).astype(np.float64), comments
