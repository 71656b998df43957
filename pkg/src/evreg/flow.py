"""Flow fields, the backward-warping operator, bidirectional flow provision,
and the iterative-refinement contraction probe."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .events import EventTensorStack, reverse_frames


@dataclass
class FlowField:
    """Dense per-pixel displacement (dy, dx) in pixels over a stated interval."""

    u: np.ndarray  # (H, W, 2)
    interval: tuple[int, int]  # microseconds
    direction: str = "forward"
    confidence: np.ndarray | None = None

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.u.ndim != 3 or self.u.shape[-1] != 2:
            raise ValueError("flow must be (H,W,2)")
        if not np.isfinite(self.u).all():
            raise ValueError("flow entries must be finite")
        if self.interval[0] == self.interval[1]:
            raise ValueError("flow interval must have nonzero span")


def _sample_bilinear(data: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                     clamp: bool = False) -> np.ndarray:
    """Plain-numpy bilinear sampling; zero fill or edge clamp outside."""
    h, w = data.shape[:2]
    if clamp:
        ys = np.clip(ys, 0, h - 1)
        xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = ys - y0
    wx = xs - x0
    out = None
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy = y0 + dy
        xx = x0 + dx
        inb = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        val = data[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        if data.ndim == 3:
            val = val * inb[..., None]
        else:
            val = val * inb
        wgt = (wy if dy else (1.0 - wy)) * (wx if dx else (1.0 - wx))
        term = val * (wgt[..., None] if data.ndim == 3 else wgt)
        out = term if out is None else out + term
    return out


def warp(x: np.ndarray, flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Backward warp: output(p) = x(p - u(p)); validity marks in-grid sources."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[:2]
    if flow.u.shape[:2] != (h, w):
        raise ValueError("flow grid does not cover the input")
    if not flow.u.any():
        return x.copy(), np.ones((h, w), dtype=bool)
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                         indexing="ij")
    ys = yy - flow.u[:, :, 0]
    xs = xx - flow.u[:, :, 1]
    out = _sample_bilinear(x, ys, xs)
    valid = (ys >= 0) & (ys <= h - 1) & (xs >= 0) & (xs <= w - 1)
    return out, valid


def _resize_bilinear(a: np.ndarray, h: int, w: int) -> np.ndarray:
    sh, sw = a.shape[:2]
    ys = np.clip((np.arange(h) + 0.5) * sh / h - 0.5, 0, sh - 1)
    xs = np.clip((np.arange(w) + 0.5) * sw / w - 0.5, 0, sw - 1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return _sample_bilinear(a, yy, xx, clamp=True)


def smooth_noise_field(rng: np.random.Generator, h: int, w: int,
                       rms: float) -> np.ndarray:
    """Spatially smooth 2-channel noise with an exact RMS vector magnitude."""
    if rms == 0.0:
        return np.zeros((h, w, 2))
    gh, gw = max(2, h // 8), max(2, w // 8)
    coarse = rng.normal(size=(gh, gw, 2))
    up = _resize_bilinear(coarse, h, w)
    cur = math.sqrt(float((up ** 2).sum(axis=-1).mean()))
    return up * (rms / cur)


def provide_flow_gt_noisy(sample, eps: float, seed: int = 0
                          ) -> tuple[FlowField, FlowField]:
    """Ground-truth flow plus smooth noise of RMS magnitude eps, both directions.

    The backward field is built from the time-reversed correspondence of the
    same interval: -u_gt plus independent noise.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    gt = sample.flow
    h, w = gt.u.shape[:2]
    rng = np.random.default_rng(seed)
    fwd = gt.u + smooth_noise_field(rng, h, w, eps)
    bwd = -gt.u + smooth_noise_field(rng, h, w, eps)
    return (FlowField(fwd, gt.interval, "forward"),
            FlowField(bwd, gt.interval, "backward"))


# --------------------------------------------------------------------------
# single-scale iterative least-squares flow
# --------------------------------------------------------------------------

def _gauss_kernel(sigma: float) -> np.ndarray:
    r = max(1, int(3 * sigma))
    xs = np.arange(-r, r + 1, dtype=float)
    k = np.exp(-xs * xs / (2 * sigma * sigma))
    return k / k.sum()


def _sep_filter(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    pad = len(k) // 2
    out = img
    for axis in (0, 1):
        moved = np.moveaxis(out, axis, 0)
        padded = np.pad(moved, [(pad, pad)] + [(0, 0)] * (moved.ndim - 1),
                        mode="edge")
        win = sliding_window_view(padded, len(k), axis=0)
        moved = np.tensordot(win, k, axes=([-1], [0]))
        out = np.moveaxis(moved, 0, axis)
    return out


def _box_filter(img: np.ndarray, size: int) -> np.ndarray:
    k = np.full(size, 1.0 / size)
    return _sep_filter(img, k)


def lk_refiner(ref: np.ndarray, moved: np.ndarray, window: int = 9,
               min_det: float = 1e-6, smooth: int = 5, step_clip: float = 1.5):
    """One dense brightness-constancy least-squares update as a closure.

    Returns refine(u) -> (u', stats); pixels with a degenerate normal matrix
    keep their current flow (their update is zero, confidence low).
    """
    ref = np.asarray(ref, dtype=np.float64)
    moved = np.asarray(moved, dtype=np.float64)
    h, w = ref.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                         indexing="ij")

    def refine(u: np.ndarray) -> tuple[np.ndarray, dict]:
        mw = _sample_bilinear(moved, yy + u[:, :, 0], xx + u[:, :, 1], clamp=True)
        gy, gx = np.gradient(mw)
        it = mw - ref
        sxx = _box_filter(gx * gx, window)
        syy = _box_filter(gy * gy, window)
        sxy = _box_filter(gx * gy, window)
        sxt = _box_filter(gx * it, window)
        syt = _box_filter(gy * it, window)
        det = sxx * syy - sxy * sxy
        good = det > min_det
        safe = np.where(good, det, 1.0)
        dx = (-sxt * syy + syt * sxy) / safe
        dy = (-syt * sxx + sxt * sxy) / safe
        d = np.stack([np.where(good, dy, 0.0), np.where(good, dx, 0.0)], axis=-1)
        d = np.clip(d, -step_clip, step_clip)
        u_new = u + d
        if smooth > 1:
            u_new = _box_filter(u_new, smooth)
        stats = {
            "mean_abs_residual": float(np.abs(it).mean()),
            "good_fraction": float(good.mean()),
        }
        return u_new, stats

    return refine


def estimate_flow_lk(stack: EventTensorStack, iters: int = 5, window: int = 9
                     ) -> tuple[FlowField, FlowField]:
    """Iterative least-squares flow between the accumulated halves of the stack."""
    n = stack.n_frames
    if n < 2:
        raise ValueError("flow estimation needs at least 2 frames")
    data = np.abs(stack.data.data).sum(axis=3)  # (N,H,W)
    half = n // 2
    first = data[:half].sum(axis=0)
    second = data[n - half:].sum(axis=0)
    t0 = stack.windows[0][0]
    t1 = stack.windows[-1][1]

    def run(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        sig = _gauss_kernel(1.5)
        a_s, b_s = _sep_filter(a, sig), _sep_filter(b, sig)
        refine = lk_refiner(a_s, b_s, window=window)
        u = np.zeros(a.shape + (2,))
        conf = None
        for _ in range(iters):
            u, stats = refine(u)
            conf = stats["good_fraction"]
        gy, gx = np.gradient(a_s)
        confident = _box_filter(gx * gx + gy * gy, window) > 1e-6
        u = u * confident[..., None]
        return u, confident

    uf, conf_f = run(first, second)
    rev = reverse_frames(stack)
    data_r = np.abs(rev.data.data).sum(axis=3)
    ub, conf_b = run(data_r[:half].sum(axis=0), data_r[n - half:].sum(axis=0))
    return (FlowField(uf, (t0, t1), "forward", conf_f),
            FlowField(ub, (t0, t1), "backward", conf_b))


# --------------------------------------------------------------------------
# contraction probe
# --------------------------------------------------------------------------

@dataclass
class RefinementTrace:
    """Per-iteration flow iterates, matching-cost summaries and error norms."""

    flows: list[FlowField]
    errors: list[float]
    stats: list[dict] = field(default_factory=list)
    rho_fit: float = 1.0
    bound: float = float("inf")
    bound_ok: bool | None = None
    diverged: bool = False


def contraction_bound(rho: float, j: int, l_dt_px: float, eps_prev: float) -> float:
    """Post-refinement error bound: rho^J * (L*(t_k - t_{k-1}) + eps_prev)."""
    return rho ** j * (l_dt_px + eps_prev)


def linear_refiner(u_gt: np.ndarray, rho: float):
    """Synthetic refiner contracting toward the target at an exact rate."""

    def refine(u: np.ndarray):
        return u_gt + rho * (u - u_gt), {"rho": rho}

    return refine


def _rms_error(u: np.ndarray, u_gt: np.ndarray) -> float:
    return math.sqrt(float(((u - u_gt) ** 2).sum(axis=-1).mean()))


def contraction_probe(refiner, sample, j: int, eps_prev: float,
                      smoothness_l: float = 0.0, seed: int = 0) -> RefinementTrace:
    """Run J refinement steps from a perturbed previous-interval flow.

    Fits the contraction rate as the geometric mean of successive error
    ratios (capped at 1) and checks the error bound; a refiner whose error
    ratio exceeds 1 at every step is reported as diverged, with no bound check.
    """
    if j < 2:
        raise ValueError("probe needs at least 2 iterations")
    gt = sample.flow if hasattr(sample, "flow") else sample
    u_gt = gt.u
    interval = gt.interval
    dt_s = abs(interval[1] - interval[0]) / 1e6
    h, w = u_gt.shape[:2]
    rng = np.random.default_rng(seed)
    u = u_gt + smooth_noise_field(rng, h, w, eps_prev)
    errors = [_rms_error(u, u_gt)]
    flows = [FlowField(u.copy(), interval, gt.direction)]
    stats: list[dict] = []
    for _ in range(j):
        res = refiner(u)
        u, st = res if isinstance(res, tuple) else (res, {})
        flows.append(FlowField(u.copy(), interval, gt.direction))
        errors.append(_rms_error(u, u_gt))
        stats.append(dict(st))
    ratios = [e1 / e0 for e0, e1 in zip(errors[:-1], errors[1:]) if e0 > 0]
    trace = RefinementTrace(flows=flows, errors=errors, stats=stats)
    if ratios:
        trace.diverged = all(r > 1.0 for r in ratios)
        log_mean = sum(math.log(max(r, 1e-300)) for r in ratios) / len(ratios)
        trace.rho_fit = min(1.0, math.exp(log_mean))
    trace.bound = contraction_bound(trace.rho_fit, j,
                                    smoothness_l * dt_s, eps_prev)
    if not trace.diverged:
        trace.bound_ok = errors[-1] <= trace.bound * (1 + 1e-9) + 1e-12
    return trace
