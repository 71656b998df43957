"""End-to-end assembly: toy image encoder, the registration network wiring,
MLP decoder, OHEM cross-entropy, AdamW with a poly schedule, training and
evaluation loops, checkpoint serialization, and the ablation-variant factory."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .events import EventTensorStack, build_event_frames, build_voxel_grid, window_events
from .flow import FlowField, provide_flow_gt_noisy
from .fusion import TemporalFusionModule
from .met import (CoarseToFineEstimator, MotionEnhancedTensor,
                  TemporalConvModule, build_bidirectional_met, pool_flow)
from .nn import MLP, Conv2d, Module
from .registration import RegistrationModule
from .synth import SceneSample, read_dataset
from .tensor import Tensor

VARIANTS = (
    "rgb_only",
    "concat_voxel",
    "concat_met",
    "concat_flow",
    "concat_temporal",
    "full_minus_bidir",
    "full_minus_brm",
    "full_minus_tfm",
    "full",
)

CHECKPOINT_MAGIC = b"BRN1"


@dataclass
class ModelConfig:
    c_in: int = 1
    channels: int = 64
    temporal_channels: int = 32
    num_classes: int = 4
    variant: str = "full"
    seed: int = 0
    lr0: float = 6e-5
    total_iters: int = 2000
    ohem_keep_fraction: float = 0.25
    poly_power: float = 0.9
    weight_decay: float = 0.01
    batch_size: int = 2
    n_frames: int = 15
    frame_bins: int = 1
    voxel_bins: int = 5
    flow_eps: float = 0.5
    max_offset: float = 4.0
    hflip: bool = True
    eval_every: int = 250
    ignore_index: int = 255

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if not 0.0 < self.ohem_keep_fraction <= 1.0:
            raise ValueError("keep fraction must be in (0, 1]")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass
class SegmentationOutput:
    logits: Tensor  # (H, W, num_classes)
    predicted: np.ndarray  # (H, W) argmax class ids


@dataclass
class ModelInputs:
    """Everything a forward pass may consume; variants read what they wire."""

    frame: np.ndarray  # (H, W) intensity 0..255
    stack: EventTensorStack | None = None
    flow_fwd: FlowField | None = None
    flow_bwd: FlowField | None = None
    voxel: np.ndarray | None = None  # (H, W, B)


class Encoder(Module):
    """Three conv blocks at strides 1, 2, 2 ending at (H/4, W/4, C)."""

    def __init__(self, c_in: int, channels: int, rng: np.random.Generator):
        widths = [max(4, channels // 4), max(8, channels // 2), channels]
        strides = [1, 2, 2]
        self.blocks = []
        prev = c_in
        for w, s in zip(widths, strides):
            self.blocks.append(Conv2d(prev, w, rng, stride=s))
            prev = w

    def __call__(self, img: Tensor) -> Tensor:
        x = img
        for blk in self.blocks:
            x = T.relu(blk(x))
        return x


class Decoder(Module):
    """Lightweight per-pixel MLP to class logits, then x4 bilinear upsampling."""

    def __init__(self, c_in: int, num_classes: int, rng: np.random.Generator):
        self.head = MLP(c_in, c_in, num_classes, rng)

    def __call__(self, feats: Tensor) -> Tensor:
        return T.upsample_bilinear(self.head(feats), 4)


class SegmentationModel(Module):
    """Variant-wired segmentation network over RGB frames and event inputs."""

    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        v = cfg.variant
        c, ct = cfg.channels, cfg.temporal_channels
        self.encoder = Encoder(cfg.c_in, c, rng)
        self.temporal = None
        self.estimator = None
        self.registration = None
        self.fusion = None
        self.reg_proj = None
        self.fuse_proj = None
        if v in ("concat_temporal", "concat_met", "full_minus_bidir",
                 "full_minus_brm", "full_minus_tfm", "full"):
            self.temporal = TemporalConvModule(cfg.frame_bins, ct, rng)
        if v in ("concat_met", "full_minus_bidir", "full_minus_brm",
                 "full_minus_tfm", "full"):
            self.estimator = CoarseToFineEstimator(c, ct, rng)
        if v in ("full", "full_minus_bidir", "full_minus_tfm"):
            self.registration = RegistrationModule(c, rng)
        if v in ("full", "full_minus_bidir", "full_minus_brm"):
            self.fusion = TemporalFusionModule(
                c, rng, max_offset=cfg.max_offset,
                bidirectional=v != "full_minus_bidir")
        if v == "full_minus_brm":
            self.reg_proj = MLP(2 * c, c, c, rng)
        if v == "full_minus_tfm":
            self.fuse_proj = MLP(3 * c, c, c, rng)
        dec_in = {
            "rgb_only": c,
            "concat_voxel": c + cfg.voxel_bins,
            "concat_flow": c + 2,
            "concat_temporal": c + ct,
            "concat_met": 2 * c,
        }.get(v, c)
        self.decoder = Decoder(dec_in, cfg.num_classes, rng)

    # -- variant wiring ------------------------------------------------
    def _met_pair(self, inputs: ModelInputs, bidirectional: bool):
        if bidirectional:
            return build_bidirectional_met(
                inputs.stack, (inputs.flow_fwd, inputs.flow_bwd),
                self.temporal, self.estimator)
        h = self.temporal(inputs.stack)
        factor = inputs.stack.data.shape[1] // h.data.shape[0]
        m_f = self.estimator(Tensor(pool_flow(inputs.flow_fwd, factor)), h.data)
        return MotionEnhancedTensor(m_f, "forward"), None

    def forward(self, inputs: ModelInputs) -> SegmentationOutput:
        cfg = self.cfg
        v = cfg.variant
        img = Tensor(np.asarray(inputs.frame, dtype=np.float64)[:, :, None] / 255.0)
        feats = self.encoder(img)
        hq, wq = feats.shape[:2]
        factor = inputs.frame.shape[0] // hq
        if v == "rgb_only":
            dec_in = feats
        elif v == "concat_voxel":
            rep = inputs.voxel.reshape(hq, factor, wq, factor, -1).mean(axis=(1, 3))
            dec_in = T.concat([feats, Tensor(rep)], axis=-1)
        elif v == "concat_flow":
            rep = pool_flow(inputs.flow_fwd, factor)
            dec_in = T.concat([feats, Tensor(rep)], axis=-1)
        elif v == "concat_temporal":
            h = self.temporal(inputs.stack)
            dec_in = T.concat([feats, h.data], axis=-1)
        elif v == "concat_met":
            m_f, _ = self._met_pair(inputs, bidirectional=False)
            dec_in = T.concat([feats, m_f.data], axis=-1)
        elif v == "full_minus_bidir":
            m_f, _ = self._met_pair(inputs, bidirectional=False)
            reg_f = self.registration.register(m_f.data, feats)
            dec_in = self.fusion(reg_f, None, feats)
        elif v == "full_minus_brm":
            m_f, m_b = self._met_pair(inputs, bidirectional=True)
            reg_f = self.reg_proj(T.concat([m_f.data, feats], axis=-1))
            reg_b = self.reg_proj(T.concat([m_b.data, feats], axis=-1))
            dec_in = self.fusion(reg_f, reg_b, feats)
        elif v == "full_minus_tfm":
            m_f, m_b = self._met_pair(inputs, bidirectional=True)
            reg_f, reg_b = self.registration(m_f, m_b, feats)
            dec_in = self.fuse_proj(T.concat([reg_f, reg_b, feats], axis=-1))
        else:  # full
            m_f, m_b = self._met_pair(inputs, bidirectional=True)
            reg_f, reg_b = self.registration(m_f, m_b, feats)
            dec_in = self.fusion(reg_f, reg_b, feats)
        logits = self.decoder(dec_in)
        return SegmentationOutput(logits, np.argmax(logits.data, axis=-1))


def variant_factory(variant: str, cfg: ModelConfig | None = None) -> SegmentationModel:
    """Build the model wiring for a named ablation variant."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    base = asdict(cfg) if cfg is not None else {}
    base["variant"] = variant
    return SegmentationModel(ModelConfig(**base))


# --------------------------------------------------------------------------
# loss and optimizer
# --------------------------------------------------------------------------

def ohem_cross_entropy(logits: Tensor, target: np.ndarray, keep_fraction: float,
                       ignore_index: int = 255) -> Tensor:
    """Mean cross-entropy over the hardest ceil(keep*P) valid pixels."""
    target = np.asarray(target, dtype=np.int64)
    k_classes = logits.shape[-1]
    valid = target != ignore_index
    if not valid.any():
        raise ValueError("no valid pixels")
    if np.any((target[valid] < 0) | (target[valid] >= k_classes)):
        raise ValueError("target labels out of range")
    safe = np.where(valid, target, 0)
    ce_map = T.logsumexp(logits, axis=-1) - T.take_channel(logits, safe)
    flat = T.reshape(ce_map, (-1,))
    valid_idx = np.flatnonzero(valid.reshape(-1))
    keep = int(math.ceil(keep_fraction * valid_idx.size))
    order = np.argsort(-flat.data[valid_idx], kind="stable")[:keep]
    return T.tmean(T.gather1d(flat, valid_idx[order]))


class AdamW:
    """Decoupled-weight-decay Adam with a poly learning-rate schedule."""

    def __init__(self, named_params, lr0: float, total_iters: int,
                 poly_power: float = 0.9, weight_decay: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(named_params)
        self.lr0 = lr0
        self.total_iters = total_iters
        self.poly_power = poly_power
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def lr_at(self, t: int) -> float:
        frac = min(1.0, t / self.total_iters)
        return self.lr0 * (1.0 - frac) ** self.poly_power

    def step(self, t: int) -> float:
        if t < 1:
            raise ValueError("step index starts at 1")
        lr = self.lr_at(t)
        b1, b2 = self.beta1, self.beta2
        for i, (name, p) in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise ValueError(f"non-finite gradient in parameter {name}")
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** t)
            v_hat = self.v[i] / (1 - b2 ** t)
            p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                    + self.weight_decay * p.data)
        return lr


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(model: SegmentationModel, path) -> None:
    cfg_blob = json.dumps(asdict(model.cfg), sort_keys=True).encode("utf-8")
    params = list(model.named_parameters())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", 1, len(cfg_blob)))
        f.write(cfg_blob)
        f.write(struct.pack("<I", len(params)))
        for name, p in params:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", p.data.ndim))
            f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            f.write(p.data.astype("<f8").tobytes())


def load_checkpoint(path) -> SegmentationModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    version, cfg_len = struct.unpack_from("<II", raw, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    cfg = ModelConfig(**json.loads(raw[pos:pos + cfg_len].decode("utf-8")))
    pos += cfg_len
    (n_params,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    model = SegmentationModel(cfg)
    table = dict(model.named_parameters())
    seen = set()
    for _ in range(n_params):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f8", offset=pos, count=count)
        pos += 8 * count
        if name not in table:
            raise ValueError(f"{path}: unknown parameter {name}")
        if table[name].data.shape != tuple(shape):
            raise ValueError(f"{path}: shape mismatch for {name}")
        table[name].data = np.ascontiguousarray(data.reshape(shape))
        seen.add(name)
    missing = set(table) - seen
    if missing:
        raise ValueError(f"{path}: missing parameters {sorted(missing)}")
    return model


# --------------------------------------------------------------------------
# data preparation and loops
# --------------------------------------------------------------------------

def prepare_inputs(sample: SceneSample, cfg: ModelConfig,
                   noise_seed: int = 0) -> tuple[ModelInputs, np.ndarray]:
    """Representations + noisy bidirectional flows for one sample."""
    t0, t1 = sample.interval
    windows = window_events(sample.events, t0, t1, cfg.n_frames)
    stack = build_event_frames(windows, cfg.frame_bins)
    voxel = build_voxel_grid(sample.events, t0, t1, cfg.voxel_bins).data
    flow_f, flow_b = provide_flow_gt_noisy(sample, cfg.flow_eps, noise_seed)
    mi = ModelInputs(frame=sample.frame, stack=stack, flow_fwd=flow_f,
                     flow_bwd=flow_b, voxel=voxel)
    return mi, sample.mask.astype(np.int64)


def hflip_inputs(mi: ModelInputs, target: np.ndarray
                 ) -> tuple[ModelInputs, np.ndarray]:
    """Mirror every input along x; flow dx changes sign."""

    def flip_flow(f: FlowField | None):
        if f is None:
            return None
        u = f.u[:, ::-1].copy()
        u[:, :, 1] = -u[:, :, 1]
        return FlowField(u, f.interval, f.direction)

    stack = None
    if mi.stack is not None:
        stack = EventTensorStack(Tensor(mi.stack.data.data[:, :, ::-1].copy()),
                                 list(mi.stack.windows))
    return ModelInputs(
        frame=mi.frame[:, ::-1].copy(),
        stack=stack,
        flow_fwd=flip_flow(mi.flow_fwd),
        flow_bwd=flip_flow(mi.flow_bwd),
        voxel=None if mi.voxel is None else mi.voxel[:, ::-1].copy(),
    ), target[:, ::-1].copy()


def evaluate_model(model: SegmentationModel,
                   prepared: list[tuple[ModelInputs, np.ndarray]]
                   ) -> tuple[float, float]:
    from .analysis import miou_accuracy

    preds, gts = [], []
    for mi, target in prepared:
        preds.append(model.forward(mi).predicted)
        gts.append(target)
    return miou_accuracy(preds, gts, model.cfg.num_classes)


def train_run(manifest_path, cfg: ModelConfig, out_dir,
              val_manifest_path=None) -> tuple[Path, Path]:
    """Seeded training loop; writes a checkpoint and a metrics CSV.

    Metrics rows are "iter,loss,lr" plus a trailing miou column when a
    validation manifest is given; mIoU is logged every ``eval_every`` steps
    and at the end.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = read_dataset(manifest_path)
    prepared = [prepare_inputs(s, cfg, noise_seed=cfg.seed * 100_003 + i)
                for i, s in enumerate(samples)]
    val_prepared = None
    if val_manifest_path is not None:
        val_samples = read_dataset(val_manifest_path)
        val_prepared = [prepare_inputs(s, cfg, noise_seed=77_777 + i)
                        for i, s in enumerate(val_samples)]
    model = SegmentationModel(cfg)
    opt = AdamW(model.named_parameters(), cfg.lr0, cfg.total_iters,
                cfg.poly_power, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    rows = []
    for t in range(1, cfg.total_iters + 1):
        batch = []
        for _ in range(cfg.batch_size):
            if not order:
                order = list(rng.permutation(len(prepared)))
            batch.append(order.pop())
        model.zero_grad()
        loss = None
        for idx in batch:
            mi, target = prepared[idx]
            if cfg.hflip and rng.uniform() < 0.5:
                mi, target = hflip_inputs(mi, target)
            out_t = model.forward(mi)
            term = ohem_cross_entropy(out_t.logits, target,
                                      cfg.ohem_keep_fraction, cfg.ignore_index)
            loss = term if loss is None else loss + term
        loss = loss * (1.0 / cfg.batch_size)
        if not np.isfinite(loss.data).all():
            raise ValueError(f"non-finite loss at iteration {t}")
        loss.backward()
        lr = opt.step(t)
        row = [str(t), repr(float(loss.data)), repr(lr)]
        if val_prepared is not None and (t % cfg.eval_every == 0
                                         or t == cfg.total_iters):
            miou, _ = evaluate_model(model, val_prepared)
            row.append(repr(miou))
        elif val_prepared is not None:
            row.append("")
        rows.append(",".join(row))
    ckpt_path = out / "checkpoint.brn1"
    save_checkpoint(model, ckpt_path)
    csv_path = out / "metrics.csv"
    header = "iter,loss,lr,miou" if val_prepared is not None else "iter,loss,lr"
    csv_path.write_text("\n".join([header] + rows) + "\n", encoding="utf-8")
    return ckpt_path, csv_path
