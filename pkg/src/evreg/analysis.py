"""Quantitative instruments: linear CKA, segmentation metrics, the
fusion-shift vs registration-shift measurements, and the ablation harness."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flow import provide_flow_gt_noisy
from .synth import SceneSample


# --------------------------------------------------------------------------
# representation similarity
# --------------------------------------------------------------------------

def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear centered kernel alignment between (n,d1) and (n,d2) matrices.

    Columns are centered here, so passing pre-centered matrices is a no-op;
    returns 0 when either self-similarity norm vanishes.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError("feature matrices must be 2-D")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    cross = np.linalg.norm(yc.T @ xc) ** 2
    denom = np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)
    if denom == 0.0:
        return 0.0
    return float(cross / denom)


def sample_feature_matrix(feats: np.ndarray, max_rows: int = 4096,
                          seed: int = 0) -> np.ndarray:
    """Flatten (H,W,C) to pixel rows, subsampling uniformly past max_rows."""
    a = np.asarray(feats, dtype=np.float64)
    flat = a.reshape(-1, a.shape[-1])
    if flat.shape[0] > max_rows:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(flat.shape[0], size=max_rows, replace=False))
        flat = flat[idx]
    return flat


# --------------------------------------------------------------------------
# segmentation metrics
# --------------------------------------------------------------------------

def confusion_matrix(preds, gts, num_classes: int,
                     ignore_index: int = 255) -> np.ndarray:
    if not isinstance(preds, (list, tuple)):
        preds, gts = [preds], [gts]
    if len(preds) == 0:
        raise ValueError("empty input")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        p = np.asarray(p, dtype=np.int64).reshape(-1)
        g = np.asarray(g, dtype=np.int64).reshape(-1)
        if p.shape != g.shape:
            raise ValueError("prediction/target shape mismatch")
        keep = g != ignore_index
        p, g = p[keep], g[keep]
        if np.any((g < 0) | (g >= num_classes)):
            raise ValueError("target labels out of range")
        if np.any((p < 0) | (p >= num_classes)):
            raise ValueError("prediction labels out of range")
        conf += np.bincount(g * num_classes + p,
                            minlength=num_classes ** 2).reshape(num_classes,
                                                                num_classes)
    if conf.sum() == 0:
        raise ValueError("no labeled pixels")
    return conf


def miou_accuracy(preds, gts, num_classes: int,
                  ignore_index: int = 255) -> tuple[float, float]:
    """Mean IoU over classes present in the ground truth, plus pixel accuracy."""
    conf = confusion_matrix(preds, gts, num_classes, ignore_index)
    present = conf.sum(axis=1) > 0
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=1) + conf.sum(axis=0) - np.diag(conf)
    iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    miou = float(iou[present].mean())
    acc = float(np.trace(conf) / conf.sum())
    return miou, acc


# --------------------------------------------------------------------------
# misalignment measurements
# --------------------------------------------------------------------------

@dataclass
class MisalignmentReport:
    delta_fuse: float
    delta_reg: float
    eps: float
    per_sample: list[tuple[float, float]] = field(default_factory=list)


def _pixelwise_mean_norm(stream, vectors: np.ndarray, width: int,
                         weights: np.ndarray | None) -> float:
    """Weighted per-pixel vector mean, then the mean norm over active pixels."""
    if len(stream) == 0:
        return 0.0
    idx = stream.y * width + stream.x
    w = np.ones(len(stream)) if weights is None else np.asarray(weights, float)
    acc = np.zeros((int(idx.max()) + 1, 2))
    wsum = np.zeros(acc.shape[0])
    np.add.at(acc, idx, vectors * w[:, None])
    np.add.at(wsum, idx, w)
    active = wsum > 0
    means = acc[active] / wsum[active][:, None]
    return float(np.linalg.norm(means, axis=1).mean())


def fusion_shift(sample: SceneSample, weights: np.ndarray | None = None) -> float:
    """Mean spatial shift a fusion weighting cannot remove: per event-carrying
    pixel, the weighted displacement between event locations and their
    ground-truth positions at t_k."""
    if sample.event_target_offset is None:
        raise ValueError("sample lacks per-event ground-truth offsets")
    if len(sample.events) == 0:
        warnings.warn("fusion_shift on a sample without events")
        return 0.0
    return _pixelwise_mean_norm(sample.events, sample.event_target_offset,
                                sample.events.width, weights)


def registration_shift(sample: SceneSample, eps: float, seed: int = 0) -> float:
    """Mean residual after flow-guided warping of each event to t_k.

    Realizes the estimated-minus-true warp difference: both warps are sampled
    at the event's own pixel, so with eps = 0 the residual is exactly zero and
    it grows with the injected flow error.
    """
    if len(sample.events) == 0:
        warnings.warn("registration_shift on a sample without events")
        return 0.0
    flow_est, _ = provide_flow_gt_noisy(sample, eps, seed)
    diff = flow_est.u - sample.flow.u
    t0, t1 = sample.interval
    lag = (t1 - sample.events.t) / (t1 - t0)
    vectors = diff[sample.events.y, sample.events.x] * lag[:, None]
    return _pixelwise_mean_norm(sample.events, vectors, sample.events.width, None)


def misalignment_report(samples: list[SceneSample], eps: float,
                        seed: int = 0) -> MisalignmentReport:
    per = [(fusion_shift(s), registration_shift(s, eps, seed + i))
           for i, s in enumerate(samples)]
    fuse = float(np.mean([a for a, _ in per]))
    reg = float(np.mean([b for _, b in per]))
    return MisalignmentReport(fuse, reg, eps, per)


# --------------------------------------------------------------------------
# representation-similarity harness
# --------------------------------------------------------------------------

def cka_scene_report(model, sample: SceneSample, eps: float = 0.5,
                     seed: int = 0) -> dict:
    """CKA of flow/voxel/MET representations against trained RGB features."""
    from . import tensor as T
    from .met import pool_flow
    from .model import prepare_inputs

    mi, _ = prepare_inputs(sample, model.cfg, noise_seed=seed)
    img = T.Tensor(mi.frame[:, :, None] / 255.0)
    feats = model.encoder(img).data
    hq = feats.shape[0]
    factor = mi.frame.shape[0] // hq
    flow_rep = pool_flow(mi.flow_fwd, factor)
    voxel_rep = mi.voxel.reshape(hq, factor, -1, factor,
                                 mi.voxel.shape[-1]).mean(axis=(1, 3))
    x = sample_feature_matrix(feats, seed=seed)
    row = {
        "cka_flow_rgb": linear_cka(sample_feature_matrix(flow_rep, seed=seed), x),
        "cka_voxel_rgb": linear_cka(sample_feature_matrix(voxel_rep, seed=seed), x),
    }
    if model.temporal is not None and model.estimator is not None:
        h = model.temporal(mi.stack)
        met = model.estimator(T.Tensor(pool_flow(mi.flow_fwd, factor)), h.data)
        row["cka_met_rgb"] = linear_cka(sample_feature_matrix(met.data, seed=seed), x)
    return row


# --------------------------------------------------------------------------
# ablation harness
# --------------------------------------------------------------------------

def ablation_harness(eval_manifest_path, checkpoint_paths: list,
                     ) -> tuple[list[dict], dict, dict]:
    """Evaluate trained checkpoints and report the variant ordering.

    Returns per-run rows (variant, seed, miou, acc), the median mIoU per
    variant, and pairwise win counts keyed by (variant_a, variant_b).
    """
    from .model import evaluate_model, load_checkpoint, prepare_inputs
    from .synth import read_dataset

    missing = [str(p) for p in checkpoint_paths if not Path(p).exists()]
    if missing:
        raise FileNotFoundError("missing checkpoints: " + ", ".join(missing))
    samples = read_dataset(eval_manifest_path)
    rows = []
    per_variant: dict[str, dict[int, float]] = {}
    for path in checkpoint_paths:
        model = load_checkpoint(path)
        prepared = [prepare_inputs(s, model.cfg, noise_seed=77_777 + i)
                    for i, s in enumerate(samples)]
        miou, acc = evaluate_model(model, prepared)
        rows.append({"variant": model.cfg.variant, "seed": model.cfg.seed,
                     "miou": miou, "acc": acc})
        per_variant.setdefault(model.cfg.variant, {})[model.cfg.seed] = miou
    medians = {v: float(np.median(list(d.values())))
               for v, d in per_variant.items()}
    wins: dict[tuple[str, str], int] = {}
    for va, da in per_variant.items():
        for vb, db in per_variant.items():
            if va == vb:
                continue
            shared = sorted(set(da) & set(db))
            wins[(va, vb)] = sum(1 for s in shared if da[s] > db[s])
    return rows, medians, wins
