"""Event data model, bit-exact file I/O, temporal windowing, and the dense
event-frame / voxel-grid representations."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor

EVT1_MAGIC = b"EVT1"
_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "<i1")])


@dataclass(frozen=True)
class Event:
    """One sensor event: timestamp (microseconds), pixel, polarity in {-1,+1}."""

    t: int
    x: int
    y: int
    p: int


class EventStream:
    """Time-sorted events over a W x H sensor, stored as column arrays."""

    def __init__(self, width: int, height: int, t=None, x=None, y=None, p=None,
                 interval: tuple[float, float] | None = None):
        self.width = int(width)
        self.height = int(height)
        self.t = np.asarray(t if t is not None else [], dtype=np.int64)
        self.x = np.asarray(x if x is not None else [], dtype=np.int64)
        self.y = np.asarray(y if y is not None else [], dtype=np.int64)
        self.p = np.asarray(p if p is not None else [], dtype=np.int64)
        self.interval = interval
        self._validate()

    def _validate(self):
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns must have equal length")
        if n == 0:
            return
        if np.any(np.diff(self.t) < 0):
            idx = int(np.argmax(np.diff(self.t) < 0)) + 1
            raise ValueError(f"timestamps decrease at event {idx}")
        if np.any((self.x < 0) | (self.x >= self.width)):
            idx = int(np.argmax((self.x < 0) | (self.x >= self.width)))
            raise ValueError(f"x out of range at event {idx}")
        if np.any((self.y < 0) | (self.y >= self.height)):
            idx = int(np.argmax((self.y < 0) | (self.y >= self.height)))
            raise ValueError(f"y out of range at event {idx}")
        if np.any(np.abs(self.p) != 1):
            idx = int(np.argmax(np.abs(self.p) != 1))
            raise ValueError(f"polarity must be -1 or +1 at event {idx}")

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __eq__(self, other) -> bool:
        return (isinstance(other, EventStream)
                and self.width == other.width and self.height == other.height
                and np.array_equal(self.t, other.t)
                and np.array_equal(self.x, other.x)
                and np.array_equal(self.y, other.y)
                and np.array_equal(self.p, other.p))


@dataclass
class EventTensorStack:
    """N sampled frames x B temporal bins of polarity-signed counts."""

    data: Tensor  # (N, H, W, B)
    windows: list[tuple[float, float]] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_bins(self) -> int:
        return self.data.shape[3]


def reverse_frames(stack: EventTensorStack) -> EventTensorStack:
    """Reverse the temporal order of the sampled frames."""
    return EventTensorStack(
        Tensor(stack.data.data[::-1].copy()),
        list(reversed(stack.windows)),
    )


# --------------------------------------------------------------------------
# file I/O
# --------------------------------------------------------------------------

def write_events(stream: EventStream, path, fmt: str = "evt1") -> None:
    path = Path(path)
    if fmt == "evt1":
        rec = np.empty(len(stream), dtype=_RECORD)
        rec["t"] = stream.t
        rec["x"] = stream.x
        rec["y"] = stream.y
        rec["p"] = stream.p
        with open(path, "wb") as f:
            f.write(EVT1_MAGIC)
            f.write(struct.pack("<IIQ", stream.width, stream.height, len(stream)))
            f.write(rec.tobytes())
    elif fmt == "csv":
        lines = ["t_us,x,y,p"]
        for i in range(len(stream)):
            lines.append(f"{stream.t[i]},{stream.x[i]},{stream.y[i]},{stream.p[i]}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        raise ValueError(f"unknown format {fmt!r}")


def parse_events(path) -> EventStream:
    """Parse EVT1 binary or CSV event files, sniffing by magic bytes."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == EVT1_MAGIC:
        return _parse_evt1(path, raw)
    return _parse_csv(path)


def _parse_evt1(path: Path, raw: bytes) -> EventStream:
    if len(raw) < 20:
        raise ValueError(f"{path}: truncated header at byte {len(raw)}")
    width, height, count = struct.unpack_from("<IIQ", raw, 4)
    expected = 20 + count * _RECORD.itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: file is {len(raw)} bytes, header implies {expected}")
    rec = np.frombuffer(raw, dtype=_RECORD, offset=20, count=count)
    t = rec["t"].astype(np.int64)
    x = rec["x"].astype(np.int64)
    y = rec["y"].astype(np.int64)
    p = rec["p"].astype(np.int64)
    bad = np.flatnonzero((x >= width) | (y >= height) | (np.abs(p) != 1))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"{path}: invalid record {i} at byte {20 + i * _RECORD.itemsize}")
    drops = np.flatnonzero(np.diff(t) < 0)
    if drops.size:
        i = int(drops[0]) + 1
        raise ValueError(
            f"{path}: decreasing timestamp in record {i} at byte {20 + i * _RECORD.itemsize}"
        )
    return EventStream(width, height, t, x, y, p)


def _parse_csv(path: Path) -> EventStream:
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "t_us,x,y,p":
        raise ValueError(f"{path}: line 1: expected header 't_us,x,y,p'")
    t, x, y, p = [], [], [], []
    width = height = 0
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ValueError(f"{path}: line {ln}: expected 4 fields, got {len(parts)}")
        try:
            ti, xi, yi, pi = (int(v) for v in parts)
        except ValueError as e:
            raise ValueError(f"{path}: line {ln}: {e}") from None
        if pi not in (-1, 1):
            raise ValueError(f"{path}: line {ln}: polarity must be -1 or +1")
        if t and ti < t[-1]:
            raise ValueError(f"{path}: line {ln}: decreasing timestamp")
        t.append(ti)
        x.append(xi)
        y.append(yi)
        p.append(pi)
        width = max(width, xi + 1)
        height = max(height, yi + 1)
    return EventStream(width, height, t, x, y, p)


# --------------------------------------------------------------------------
# windowing and dense representations
# --------------------------------------------------------------------------

def window_events(stream: EventStream, t_k1: int, t_k: int, n: int) -> list[EventStream]:
    """Split [t_k1, t_k] into n half-open windows, last one closed on the right.

    Window i covers [t_k1 + i*d, t_k1 + (i+1)*d) with d = (t_k - t_k1)/n; the
    union keeps every in-range event exactly once.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if not t_k1 < t_k:
        raise ValueError("window requires t_k1 < t_k")
    span = int(t_k) - int(t_k1)
    keep = (stream.t >= t_k1) & (stream.t <= t_k)
    t = stream.t[keep]
    idx = np.minimum((t - t_k1) * n // span, n - 1)
    out = []
    for i in range(n):
        sel = idx == i
        lo = t_k1 + i * span / n
        hi = t_k1 + (i + 1) * span / n
        out.append(EventStream(
            stream.width, stream.height,
            t[sel], stream.x[keep][sel], stream.y[keep][sel], stream.p[keep][sel],
            interval=(lo, hi),
        ))
    return out


def build_event_frames(windows: list[EventStream], b: int = 1) -> EventTensorStack:
    """Accumulate each window into b sub-bins of polarity-signed counts."""
    if b < 1:
        raise ValueError("b must be >= 1")
    if not windows:
        raise ValueError("no windows given")
    h, w = windows[0].height, windows[0].width
    n = len(windows)
    data = np.zeros((n, h, w, b))
    for i, win in enumerate(windows):
        if win.interval is None:
            raise ValueError("window streams need interval bounds")
        lo, hi = win.interval
        if len(win) == 0:
            continue
        if hi > lo:
            sub = np.clip(((win.t - lo) * b / (hi - lo)).astype(np.int64), 0, b - 1)
        else:
            sub = np.zeros(len(win), dtype=np.int64)
        np.add.at(data, (i, win.y, win.x, sub), win.p.astype(np.float64))
    return EventTensorStack(Tensor(data), [w_.interval for w_ in windows])


def build_voxel_grid(stream: EventStream, t0: int, t1: int, b: int,
                     normalize: bool = False) -> Tensor:
    """Deposit events into b bins with the bilinear temporal kernel.

    Each event spreads p * max(0, 1 - |bin - t*|) over the neighboring bins,
    t* = (b-1)(t-t0)/(t1-t0); total absolute mass per in-range event is 1.
    """
    if b < 2:
        raise ValueError("voxel grid needs b >= 2")
    if not t1 > t0:
        raise ValueError("voxel grid requires t1 > t0")
    h, w = stream.height, stream.width
    grid = np.zeros((h, w, b))
    keep = (stream.t >= t0) & (stream.t <= t1)
    if keep.any():
        t = stream.t[keep].astype(np.float64)
        x = stream.x[keep]
        y = stream.y[keep]
        p = stream.p[keep].astype(np.float64)
        tstar = (b - 1) * (t - t0) / (t1 - t0)
        b0 = np.floor(tstar).astype(np.int64)
        frac = tstar - b0
        b0c = np.clip(b0, 0, b - 1)
        np.add.at(grid, (y, x, b0c), p * (1.0 - frac))
        hi_ok = b0 + 1 <= b - 1
        np.add.at(grid, (y[hi_ok], x[hi_ok], b0[hi_ok] + 1), p[hi_ok] * frac[hi_ok])
    if normalize:
        m = np.abs(grid).max()
        if m > 0:
            grid = grid / m
    return Tensor(grid)
