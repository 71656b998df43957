"""Synthetic scene generator with co-registered ground truth: intensity
frames, ideal threshold-crossing event streams, dense flow, and class masks.

The event model is noise-free: a pixel emits whenever its log intensity
crosses a multiple of theta since that pixel's last event, with the timestamp
linearly interpolated inside the rendering sub-step. An optional timestamp
jitter knob is the only realism control.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .events import EventStream, write_events, parse_events
from .flow import FlowField
from .formats import read_flt1, read_pgm, write_flt1, write_pgm

LOG_EPS = 1e-3  # guard for log(intensity)


@dataclass
class SceneObject:
    shape: str  # "rect" or "disk"
    class_id: int
    position: tuple[float, float]  # (y, x) center at t = 0
    velocity: tuple[float, float]  # (vy, vx) in px/s
    intensity: float
    size: float | tuple[float, float]  # disk radius or rect (h, w)
    texture_amp: float = 0.0  # relative interior modulation
    texture_freq: float = 0.12  # cycles per pixel
    osc_amp_px: float = 0.0  # optional x-oscillation about the linear path
    osc_period_us: int = 0

    def center(self, t_us: float) -> tuple[float, float]:
        t_s = t_us / 1e6
        cy = self.position[0] + self.velocity[0] * t_s
        cx = self.position[1] + self.velocity[1] * t_s
        if self.osc_amp_px and self.osc_period_us:
            cx += self.osc_amp_px * math.sin(2 * math.pi * t_us / self.osc_period_us)
        return cy, cx


@dataclass
class SceneSpec:
    width: int
    height: int
    duration_us: int
    interval_us: int
    objects: list[SceneObject]
    background: float = 60.0
    theta: float = 0.2
    seed: int = 0
    substeps: int = 32
    jitter_us: int = 0

    def __post_init__(self):
        ids = [o.class_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("class ids must be unique per object")
        if any(i < 1 for i in ids):
            raise ValueError("class ids start at 1 (0 is background)")
        if self.theta <= 0:
            raise ValueError("contrast threshold must be positive")
        if self.substeps < 32:
            raise ValueError("at least 32 sub-steps per interval are required")
        for o in self.objects:
            if not all(np.isfinite(o.velocity)):
                raise ValueError("velocities must be finite")


@dataclass
class SceneSample:
    """One RGB-interval worth of co-registered ground truth."""

    frame: np.ndarray  # (H, W) intensity at t_k, u8-valued
    events: EventStream  # over [t_{k-1}, t_k]
    flow: FlowField  # forward ground truth, displacement over the interval
    mask: np.ndarray  # (H, W) class ids at t_k
    interval: tuple[int, int]
    occlusion: np.ndarray | None = None  # flagged unreliable-correspondence pixels
    event_target_offset: np.ndarray | None = None  # (E,2) object motion t_e -> t_k
    event_object: np.ndarray | None = None  # (E,) generating object index, -1 none


def _coverage(obj: SceneObject, cy: float, cx: float, h: int, w: int) -> np.ndarray:
    ys = np.arange(h, dtype=float)
    xs = np.arange(w, dtype=float)
    if obj.shape == "rect":
        hh, hw = (obj.size if isinstance(obj.size, tuple) else (obj.size, obj.size))
        hh, hw = hh / 2.0, hw / 2.0
        ov_y = np.clip(np.minimum(ys + 0.5, cy + hh) - np.maximum(ys - 0.5, cy - hh), 0, 1)
        ov_x = np.clip(np.minimum(xs + 0.5, cx + hw) - np.maximum(xs - 0.5, cx - hw), 0, 1)
        return np.outer(ov_y, ov_x)
    if obj.shape == "disk":
        r = float(obj.size) if not isinstance(obj.size, tuple) else float(obj.size[0])
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        return np.clip(r + 0.5 - d, 0.0, 1.0)
    raise ValueError(f"unknown shape {obj.shape!r}")


def _intensity(obj: SceneObject, cy: float, cx: float, h: int, w: int):
    if obj.texture_amp == 0.0:
        return obj.intensity
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                         indexing="ij")
    tex = np.sin(2 * math.pi * obj.texture_freq * (xx - cx)) * \
        np.sin(2 * math.pi * obj.texture_freq * (yy - cy))
    return np.clip(obj.intensity * (1.0 + obj.texture_amp * tex), 0.0, 255.0)


def _render(spec: SceneSpec, t_us: float):
    """Composite intensity, per-object coverage, and the top-class mask at t."""
    h, w = spec.height, spec.width
    img = np.full((h, w), float(spec.background))
    mask = np.zeros((h, w), dtype=np.int64)
    covs = []
    for idx, obj in enumerate(spec.objects):
        cy, cx = obj.center(t_us)
        cov = _coverage(obj, cy, cx, h, w)
        img = img * (1.0 - cov) + _intensity(obj, cy, cx, h, w) * cov
        mask = np.where(cov > 0.5, obj.class_id, mask)
        covs.append(cov)
    return img, covs, mask


def _boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels within one step of a class discontinuity (4-neighborhood)."""
    edge = np.zeros(mask.shape, dtype=bool)
    edge[:-1, :] |= mask[:-1, :] != mask[1:, :]
    edge[1:, :] |= mask[:-1, :] != mask[1:, :]
    edge[:, :-1] |= mask[:, :-1] != mask[:, 1:]
    edge[:, 1:] |= mask[:, :-1] != mask[:, 1:]
    grown = edge.copy()
    grown[:-1, :] |= edge[1:, :]
    grown[1:, :] |= edge[:-1, :]
    grown[:, :-1] |= edge[:, 1:]
    grown[:, 1:] |= edge[:, :-1]
    return grown


def generate_scene(spec: SceneSpec) -> list[SceneSample]:
    """Render the scene and emit one co-registered sample per RGB interval."""
    h, w = spec.height, spec.width
    n_samples = spec.duration_us // spec.interval_us
    rng = np.random.default_rng(spec.seed)
    ref = np.log(_render(spec, 0.0)[0] + LOG_EPS)
    img_prev, covs_prev, mask_prev = _render(spec, 0.0)
    log_prev = np.log(img_prev + LOG_EPS)
    left_canvas: set[int] = set()
    samples = []
    for k in range(1, n_samples + 1):
        t_start = (k - 1) * spec.interval_us
        t_end = k * spec.interval_us
        ev_t, ev_x, ev_y, ev_p, ev_obj = [], [], [], [], []
        for j in range(1, spec.substeps + 1):
            tau_prev = t_start + (j - 1) * spec.interval_us / spec.substeps
            tau = t_start + j * spec.interval_us / spec.substeps
            img_new, covs_new, _ = _render(spec, tau)
            log_new = np.log(img_new + LOG_EPS)
            diff = log_new - ref
            n_cross = np.floor(np.abs(diff) / spec.theta).astype(np.int64)
            if n_cross.any():
                ys, xs = np.nonzero(n_cross)
                sign = np.sign(diff[ys, xs]).astype(np.int64)
                dcov = np.stack([np.abs(covs_new[i][ys, xs] - covs_prev[i][ys, xs])
                                 for i in range(len(spec.objects))], axis=0) \
                    if spec.objects else np.zeros((0, len(ys)))
                if len(spec.objects):
                    owner = np.argmax(dcov, axis=0)
                    moved = dcov[owner, np.arange(len(ys))] > 0.01
                    covering = np.stack([covs_new[i][ys, xs]
                                         for i in range(len(spec.objects))], axis=0)
                    top = np.argmax(covering, axis=0)
                    covered = covering[top, np.arange(len(ys))] > 0.25
                    owner = np.where(moved, owner, np.where(covered, top, -1))
                else:
                    owner = np.full(len(ys), -1)
                denom = log_new[ys, xs] - log_prev[ys, xs]
                denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
                max_m = int(n_cross.max())
                for m in range(1, max_m + 1):
                    sel = n_cross[ys, xs] >= m
                    level = ref[ys, xs][sel] + sign[sel] * spec.theta * m
                    frac = np.clip((level - log_prev[ys, xs][sel]) / denom[sel], 0.0, 1.0)
                    te = np.rint(tau_prev + frac * (tau - tau_prev)).astype(np.int64)
                    ev_t.append(np.clip(te, t_start, t_end))
                    ev_x.append(xs[sel])
                    ev_y.append(ys[sel])
                    ev_p.append(sign[sel])
                    ev_obj.append(owner[sel])
                ref[ys, xs] += sign * spec.theta * n_cross[ys, xs]
            log_prev = log_new
            covs_prev = covs_new
        # assemble the interval's stream, ordered deterministically
        if ev_t:
            t = np.concatenate(ev_t)
            x = np.concatenate(ev_x)
            y = np.concatenate(ev_y)
            p = np.concatenate(ev_p)
            obj_id = np.concatenate(ev_obj)
            if spec.jitter_us:
                t = np.clip(t + rng.integers(-spec.jitter_us, spec.jitter_us + 1,
                                             size=t.shape), t_start, t_end)
            order = np.lexsort((p, x, y, t))
            t, x, y, p, obj_id = t[order], x[order], y[order], p[order], obj_id[order]
        else:
            t = x = y = p = obj_id = np.array([], dtype=np.int64)
        stream = EventStream(w, h, t, x, y, p, interval=(t_start, t_end))
        img_k, covs_k, mask_k = _render(spec, t_end)
        frame = np.clip(np.rint(img_k), 0, 255).astype(np.float64)
        # ground-truth flow on the target grid: object displacement over the interval
        u = np.zeros((h, w, 2), dtype=np.float64)
        disp = {}
        for idx, obj in enumerate(spec.objects):
            cy0, cx0 = obj.center(t_start)
            cy1, cx1 = obj.center(t_end)
            disp[idx] = (cy1 - cy0, cx1 - cx0)
            sel = mask_k == obj.class_id
            u[sel] = disp[idx]
            if covs_k[idx].sum() == 0.0 and idx not in left_canvas:
                left_canvas.add(idx)
                warnings.warn(f"object {obj.class_id} left the canvas at sample {k}")
        u = u.astype(np.float32).astype(np.float64)
        # occlusion flags: vacated pixels, cross-object backtracks, class borders
        occ = (mask_prev > 0) & (mask_k == 0)
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        sy = np.clip(np.rint(yy - u[:, :, 0]).astype(np.int64), 0, h - 1)
        sx = np.clip(np.rint(xx - u[:, :, 1]).astype(np.int64), 0, w - 1)
        occ |= (mask_k > 0) & (mask_prev[sy, sx] != mask_k)
        occ |= _boundary(mask_k) | _boundary(mask_prev)
        # per-event oracle metadata: object motion between t_e and t_k
        off = np.zeros((len(stream), 2), dtype=np.float64)
        for idx, obj in enumerate(spec.objects):
            sel = obj_id == idx
            if sel.any():
                cy1, cx1 = obj.center(t_end)
                cys = np.array([obj.center(float(te))[0] for te in t[sel]])
                cxs = np.array([obj.center(float(te))[1] for te in t[sel]])
                off[sel, 0] = cy1 - cys
                off[sel, 1] = cx1 - cxs
        samples.append(SceneSample(
            frame=frame,
            events=stream,
            flow=FlowField(u, (t_start, t_end), "forward"),
            mask=mask_k.copy(),
            interval=(t_start, t_end),
            occlusion=occ,
            event_target_offset=off,
            event_object=obj_id.copy(),
        ))
        mask_prev = mask_k
    return samples


# --------------------------------------------------------------------------
# dataset I/O
# --------------------------------------------------------------------------

def write_dataset(samples: list[SceneSample], out_dir) -> Path:
    """Write per-sample PGM/EVT1/FLT1 files plus a manifest of path tuples."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        names = (f"s{i:04d}_frame.pgm", f"s{i:04d}_events.evt1",
                 f"s{i:04d}_flow.flt1", f"s{i:04d}_mask.pgm")
        try:
            write_pgm(out / names[0], s.frame,
                      comment=f"interval_us {s.interval[0]} {s.interval[1]}")
            write_events(s.events, out / names[1], "evt1")
            write_flt1(out / names[2], s.flow.u)
            write_pgm(out / names[3], s.mask)
        except OSError as e:
            raise OSError(f"failed writing sample {i} under {out}: {e}") from e
        lines.append(" ".join(names))
    manifest = out / "manifest.txt"
    manifest.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return manifest


def read_dataset(manifest_path) -> list[SceneSample]:
    """Re-parse a written dataset; oracle-only metadata is not on disk."""
    manifest = Path(manifest_path)
    base = manifest.parent
    samples = []
    for ln, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{manifest}: line {ln}: expected 4 paths")
        frame, comments = read_pgm(base / parts[0])
        interval = None
        for c in comments:
            fields = c.split()
            if len(fields) == 3 and fields[0] == "interval_us":
                interval = (int(fields[1]), int(fields[2]))
        if interval is None:
            raise ValueError(f"{base / parts[0]}: missing interval_us comment")
        events = parse_events(base / parts[1])
        events.interval = interval
        u = read_flt1(base / parts[2])
        mask, _ = read_pgm(base / parts[3])
        samples.append(SceneSample(
            frame=frame,
            events=events,
            flow=FlowField(u, interval, "forward"),
            mask=mask.astype(np.int64),
            interval=interval,
        ))
    return samples


# --------------------------------------------------------------------------
# standard scene suites
# --------------------------------------------------------------------------

def _stratified_positions(rng: np.random.Generator, n: int, h: int, w: int):
    """Spread n starting centers over the canvas without initial overlap."""
    rows = np.linspace(h * 0.25, h * 0.75, n)
    out = []
    for r in rows:
        out.append((float(r + rng.uniform(-3, 3)),
                    float(rng.uniform(w * 0.3, w * 0.7))))
    return out


def training_scene_spec(seed: int, size: int = 64, n_intervals: int = 6,
                        interval_us: int = 30_000) -> SceneSpec:
    """Segmentation scenes where two classes differ only by motion direction.

    Class 1 and 2 share one intensity and are told apart by their horizontal
    velocity sign; class 3 has its own intensity. Shapes are sampled so that
    geometry is not a class cue. Start positions back off against the velocity
    so trajectories stay centered on the canvas.
    """
    rng = np.random.default_rng(seed)
    positions = _stratified_positions(rng, 3, size, size)
    duration_s = n_intervals * interval_us / 1e6
    objects = []
    for class_id, pos in zip((1, 2, 3), positions):
        speed = rng.uniform(50.0, 200.0)
        if class_id == 1:
            vel = (speed * rng.uniform(-0.25, 0.25), speed)
            intensity = 185.0
        elif class_id == 2:
            vel = (speed * rng.uniform(-0.25, 0.25), -speed)
            intensity = 185.0
        else:
            ang = rng.uniform(0, 2 * math.pi)
            vel = (speed * math.sin(ang), speed * math.cos(ang))
            intensity = 115.0
        start = (pos[0] - vel[0] * duration_s / 2, pos[1] - vel[1] * duration_s / 2)
        shape = "rect" if rng.uniform() < 0.5 else "disk"
        if shape == "rect":
            sz = (float(rng.uniform(12, 20)), float(rng.uniform(12, 20)))
        else:
            sz = float(rng.uniform(7, 10))
        objects.append(SceneObject(shape, class_id, start, vel, intensity, sz))
    return SceneSpec(size, size, n_intervals * interval_us, interval_us,
                     objects, background=55.0, theta=0.2, seed=seed)


def misalignment_scene_spec(seed: int, size: int = 64,
                            interval_us: int = 30_000) -> SceneSpec:
    """Scenes for the fusion-shift vs registration-shift measurements."""
    rng = np.random.default_rng(1000 + seed)
    speed = rng.uniform(50.0, 200.0)
    ang = rng.uniform(0, 2 * math.pi)
    objects = [SceneObject(
        "rect" if rng.uniform() < 0.5 else "disk",
        1,
        (size / 2 + rng.uniform(-6, 6), size / 2 + rng.uniform(-6, 6)),
        (speed * math.sin(ang), speed * math.cos(ang)),
        190.0,
        (16.0, 16.0) if rng.uniform() < 0.5 else 9.0,
    )]
    return SceneSpec(size, size, 2 * interval_us, interval_us, objects,
                     background=55.0, theta=0.2, seed=seed)


def smooth_scene_spec(seed: int, size: int = 64,
                      interval_us: int = 30_000) -> SceneSpec:
    """A large low-frequency textured object for flow-estimator probes."""
    rng = np.random.default_rng(2000 + seed)
    speed = rng.uniform(40.0, 80.0)
    objects = [SceneObject(
        "rect", 1,
        (size / 2, size / 2),
        (0.0, speed),
        170.0,
        (size * 0.8, size * 0.8),
        texture_amp=0.5,
        texture_freq=0.05,
    )]
    return SceneSpec(size, size, 2 * interval_us, interval_us, objects,
                     background=60.0, theta=0.15, seed=seed)


def oscillating_scene_spec(seed: int = 0, size: int = 64,
                           interval_us: int = 30_000) -> SceneSpec:
    """Time-symmetric motion: the object returns to its start each interval."""
    objects = [SceneObject(
        "disk", 1,
        (size / 2, size / 2),
        (0.0, 0.0),
        190.0,
        9.0,
        osc_amp_px=4.0,
        osc_period_us=2 * interval_us,
    )]
    return SceneSpec(size, size, interval_us, interval_us, objects,
                     background=55.0, theta=0.2, seed=seed)
