"""Dense float64 arrays with reverse-mode automatic differentiation.

The recorded graph is the tape: every op links its output to its parents
through a backward closure, and ``Tensor.backward`` replays the closures in
reverse topological order, accumulating gradients additively on fan-out.
All ops are pure functions of immutable inputs; nothing here touches global
state except read-only geometry caches.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ComplexPair",
    "add",
    "mul",
    "matmul",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "softmax",
    "logsumexp",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "conv2d",
    "conv3d",
    "depthwise_conv2d",
    "avg_pool2d",
    "global_avg_pool",
    "rfft2",
    "irfft2",
    "bilinear_sample",
    "deformable_conv2d",
    "upsample_bilinear",
    "take_channel",
    "gather1d",
    "grad_check",
]


class Tensor:
    """A float64 array plus an optional gradient slot.

    ``data`` is always a C-contiguous float64 ndarray. ``requires_grad``
    marks leaves whose gradient the tape should produce; interior nodes
    inherit it from their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / float(other))
        raise TypeError("tensor division only supports scalars")

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    # -- tape --------------------------------------------------------------
    def backward(self):
        """Reverse-mode sweep seeding this (scalar) tensor with grad 1."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        if not np.isfinite(self.data).all():
            raise ValueError("backward on non-finite loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and reductions
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0
    out_data = np.where(mask, a.data, 0.0)

    def bwd(g):
        _accum(a, g * mask)

    return _make(out_data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        _accum(a, g * s * (1.0 - s))

    return _make(s, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - t * t))

    return _make(t, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.data)

    def bwd(g):
        _accum(a, g * e)

    return _make(e, (a,), bwd)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), bwd)


def softmax(a: Tensor, axis: int) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _make(y, (a,), bwd)


def logsumexp(a: Tensor, axis: int) -> Tensor:
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_data = np.squeeze(np.log(s) + m, axis=axis)

    def bwd(g):
        _accum(a, np.expand_dims(g, axis) * (e / s))

    return _make(out_data, (a,), bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _make(out_data, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)]
    )
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# --------------------------------------------------------------------------
# shape plumbing
# --------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape

    def bwd(g):
        _accum(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    a = _as_tensor(a)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bwd)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(out_data, tuple(ts), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    a = _as_tensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        _accum(a, full)

    return _make(a.data[sl].copy(), (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bwd)


def take_channel(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather along the last axis with one integer index per leading position."""
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != a.data.shape[:-1]:
        raise ValueError("index shape must match the leading axes")
    out_data = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        _accum(a, full)

    return _make(out_data, (a,), bwd)


def gather1d(a: Tensor, index: np.ndarray) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 1:
        raise ValueError("gather1d expects a 1-D tensor")
    idx = np.asarray(index, dtype=np.int64)

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _make(a.data[idx].copy(), (a,), bwd)


# --------------------------------------------------------------------------
# convolution family
# --------------------------------------------------------------------------

_COL_CACHE: dict = {}


def _pad_spatial(x: np.ndarray, p: int, spatial_axes=(0, 1)) -> np.ndarray:
    if p == 0:
        return x
    pads = [(0, 0)] * x.ndim
    for ax in spatial_axes:
        pads[ax] = (p, p)
    return np.pad(x, pads)


def _conv2d_raw(x: np.ndarray, k: np.ndarray, stride: int, padding: int) -> tuple:
    """Cross-correlation on (H,W,Cin) with kernel (kh,kw,Cin,Cout)."""
    H, W, Cin = x.shape
    kh, kw, kcin, Cout = k.shape
    if kcin != Cin:
        raise ValueError(f"kernel expects {kcin} input channels, got {Cin}")
    xp = _pad_spatial(x, padding)
    Hp, Wp = xp.shape[:2]
    if kh > Hp or kw > Wp:
        raise ValueError("kernel larger than padded input")
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::stride, ::stride]
    Ho, Wo = win.shape[:2]
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(
        Ho * Wo, kh * kw * Cin
    )
    out = (cols @ k.reshape(kh * kw * Cin, Cout)).reshape(Ho, Wo, Cout)
    return out, cols


def _dilate2(g: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return g
    Ho, Wo = g.shape[:2]
    out = np.zeros(((Ho - 1) * stride + 1, (Wo - 1) * stride + 1) + g.shape[2:])
    out[::stride, ::stride] = g
    return out


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation; odd kernel, zero padding."""
    x, k = _as_tensor(x), _as_tensor(k)
    kh, kw = k.data.shape[:2]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d requires odd kernel sizes")
    out_data, cols = _conv2d_raw(x.data, k.data, stride, padding)
    H, W, Cin = x.data.shape
    Cout = k.data.shape[3]

    def bwd(g):
        g2 = g.reshape(-1, Cout)
        if k.requires_grad:
            _accum(k, (cols.T @ g2).reshape(k.data.shape))
        if x.requires_grad:
            gd = _dilate2(g, stride)
            # zero-fill rows/cols the strided sweep never covered
            th = H + 2 * padding - kh + 1 - gd.shape[0]
            tw = W + 2 * padding - kw + 1 - gd.shape[1]
            kr = np.ascontiguousarray(k.data[::-1, ::-1].transpose(0, 1, 3, 2))
            # full correlation against the flipped kernel recovers d/dx
            gp = np.pad(gd, [(kh - 1, kh - 1 + th), (kw - 1, kw - 1 + tw), (0, 0)])
            dxp, _ = _conv2d_raw(gp, kr, 1, 0)
            if padding:
                dxp = dxp[padding:padding + H, padding:padding + W]
            _accum(x, dxp)

    return _make(out_data, (x, k), bwd)


def _conv3d_raw(x: np.ndarray, k: np.ndarray, padding: int) -> tuple:
    D, H, W, Cin = x.shape
    kd, kh, kw, kcin, Cout = k.shape
    if kcin != Cin:
        raise ValueError(f"kernel expects {kcin} input channels, got {Cin}")
    xp = _pad_spatial(x, padding, spatial_axes=(1, 2))
    if kd > D:
        raise ValueError("temporal kernel deeper than input")
    win = sliding_window_view(xp, (kd, kh, kw), axis=(0, 1, 2))
    Do, Ho, Wo = win.shape[:3]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 6, 3)).reshape(
        Do * Ho * Wo, kd * kh * kw * Cin
    )
    out = (cols @ k.reshape(-1, Cout)).reshape(Do, Ho, Wo, Cout)
    return out, cols


def conv3d(x: Tensor, k: Tensor, padding: int = 1) -> Tensor:
    """3-D cross-correlation on (D,H,W,Cin); spatial zero padding, no depth pad."""
    x, k = _as_tensor(x), _as_tensor(k)
    out_data, cols = _conv3d_raw(x.data, k.data, padding)
    D, H, W, Cin = x.data.shape
    kd, kh, kw, _, Cout = k.data.shape

    def bwd(g):
        if k.requires_grad:
            g2 = g.reshape(-1, Cout)
            _accum(k, (cols.T @ g2).reshape(k.data.shape))
        if x.requires_grad:
            kr = np.ascontiguousarray(
                k.data[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3)
            )
            gp = np.pad(g, [(kd - 1, kd - 1), (kh - 1, kh - 1),
                            (kw - 1, kw - 1), (0, 0)])
            dxp, _ = _conv3d_raw(gp, kr, 0)
            if padding:
                dxp = dxp[:, padding:padding + H, padding:padding + W]
            _accum(x, dxp)

    return _make(out_data, (x, k), bwd)


def depthwise_conv2d(x: Tensor, k: Tensor, padding: int = 1) -> Tensor:
    """Per-channel 2-D cross-correlation; kernel (kh,kw,C)."""
    x, k = _as_tensor(x), _as_tensor(k)
    H, W, C = x.data.shape
    kh, kw, kc = k.data.shape
    if kc != C:
        raise ValueError("depthwise kernel channel mismatch")
    xp = _pad_spatial(x.data, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))
    # win: (Ho, Wo, C, kh, kw)
    out_data = np.einsum("hwcij,ijc->hwc", win, k.data, optimize=True)

    def bwd(g):
        if k.requires_grad:
            _accum(k, np.einsum("hwcij,hwc->ijc", win, g, optimize=True))
        if x.requires_grad:
            gp = np.pad(g, [(kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)])
            gwin = sliding_window_view(gp, (kh, kw), axis=(0, 1))
            kr = k.data[::-1, ::-1]
            dxp = np.einsum("hwcij,ijc->hwc", gwin, kr, optimize=True)
            if padding:
                dxp = dxp[padding:padding + H, padding:padding + W]
            _accum(x, dxp)

    return _make(out_data, (x, k), bwd)


def avg_pool2d(x: Tensor, factor: int = 2) -> Tensor:
    """Average pooling over non-overlapping factor x factor windows.

    Works on (..., H, W, C); H and W must divide by the factor.
    """
    x = _as_tensor(x)
    *lead, H, W, C = x.data.shape
    if H % factor or W % factor:
        raise ValueError("avg_pool2d needs spatial sizes divisible by the factor")
    shaped = x.data.reshape(*lead, H // factor, factor, W // factor, factor, C)
    out_data = shaped.mean(axis=(-4, -2))

    def bwd(g):
        gg = np.repeat(np.repeat(g, factor, axis=-3), factor, axis=-2)
        _accum(x, gg / (factor * factor))

    return _make(out_data, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Adaptive average pooling of (H,W,C) down to (1,1,C)."""
    x = _as_tensor(x)
    H, W, C = x.data.shape
    out_data = x.data.mean(axis=(0, 1), keepdims=True)

    def bwd(g):
        _accum(x, np.broadcast_to(g / (H * W), x.data.shape).copy())

    return _make(out_data, (x,), bwd)


# --------------------------------------------------------------------------
# real-input 2-D FFT pair
# --------------------------------------------------------------------------

class ComplexPair:
    """Half-spectrum of a real 2-D signal as two same-shaped real tensors."""

    def __init__(self, real: Tensor, imag: Tensor):
        real, imag = _as_tensor(real), _as_tensor(imag)
        if real.data.shape != imag.data.shape:
            raise ValueError("real/imag shape mismatch")
        self.real = real
        self.imag = imag

    @property
    def shape(self):
        return self.real.data.shape

    def layout(self) -> Tensor:
        """Concatenate real and imaginary parts along the channel axis."""
        return concat([self.real, self.imag], axis=-1)

    @staticmethod
    def from_layout(t: Tensor) -> "ComplexPair":
        c2 = t.data.shape[-1]
        if c2 % 2:
            raise ValueError("layout channel count must be even")
        half = c2 // 2
        return ComplexPair(narrow(t, -1, 0, half), narrow(t, -1, half, half))

    def __mul__(self, other: "ComplexPair") -> "ComplexPair":
        ar, ai, br, bi = self.real, self.imag, other.real, other.imag
        return ComplexPair(ar * br - ai * bi, ar * bi + ai * br)


def rfft2(x: Tensor) -> ComplexPair:
    """2-D DFT over the spatial axes of (H,W,C); half-spectrum layout."""
    x = _as_tensor(x)
    if x.data.size == 0:
        raise ValueError("empty input")
    if x.data.ndim != 3:
        raise ValueError("rfft2 expects (H,W,C)")
    H, W, C = x.data.shape
    spec = np.fft.rfft2(x.data, axes=(0, 1))
    Wh = spec.shape[1]

    def bwd_real(g):
        emb = np.zeros((H, W, C), dtype=np.complex128)
        emb[:, :Wh] = g
        _accum(x, H * W * np.fft.ifft2(emb, axes=(0, 1)).real)

    def bwd_imag(g):
        emb = np.zeros((H, W, C), dtype=np.complex128)
        emb[:, :Wh] = 1j * g
        _accum(x, H * W * np.fft.ifft2(emb, axes=(0, 1)).real)

    real = _make(spec.real.copy(), (x,), bwd_real)
    imag = _make(spec.imag.copy(), (x,), bwd_imag)
    return ComplexPair(real, imag)


def _mirror_indices(H: int, W: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    Wh = W // 2 + 1
    kx = np.arange(Wh, W)
    src_kx = W - kx
    src_ky = (H - np.arange(H)) % H
    return kx, src_kx, src_ky


def irfft2(spec: ComplexPair, out_width: int) -> Tensor:
    """Inverse of rfft2; the half spectrum must match out_width."""
    H, Wh, C = spec.shape
    if out_width // 2 + 1 != Wh:
        raise ValueError(
            f"half-spectrum width {Wh} inconsistent with output width {out_width}"
        )
    W = out_width
    xr, xi = spec.real, spec.imag
    full = np.zeros((H, W, C), dtype=np.complex128)
    full[:, :Wh] = xr.data + 1j * xi.data
    if W > Wh:
        kx, src_kx, src_ky = _mirror_indices(H, W)
        full[:, Wh:] = np.conj(full[src_ky[:, None], src_kx[None, :]])
    out_data = np.fft.ifft2(full, axes=(0, 1)).real

    def bwd(g):
        G = np.fft.fft2(g, axes=(0, 1)) / (H * W)
        dr = G.real[:, :Wh].copy()
        di = G.imag[:, :Wh].copy()
        if W > Wh:
            kx, src_kx, src_ky = _mirror_indices(H, W)
            tail = G[:, Wh:]
            np.add.at(dr, (src_ky[:, None], src_kx[None, :]), tail.real)
            np.add.at(di, (src_ky[:, None], src_kx[None, :]), -tail.imag)
        _accum(xr, dr)
        _accum(xi, di)

    return _make(out_data, (xr, xi), bwd)


# --------------------------------------------------------------------------
# sampling ops
# --------------------------------------------------------------------------

def _bilinear_parts(data: np.ndarray, ys: np.ndarray, xs: np.ndarray):
    """Neighbor values, weights and masks for zero-fill bilinear sampling."""
    H, W = data.shape[:2]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = ys - y0
    wx = xs - x0
    parts = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy = y0 + dy
        xx = x0 + dx
        inb = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        yc = np.clip(yy, 0, H - 1)
        xc = np.clip(xx, 0, W - 1)
        wgt = (wy if dy else (1.0 - wy)) * (wx if dx else (1.0 - wx))
        val = data[yc, xc] * inb[..., None]
        parts.append((val, wgt, inb, yc, xc, dy, dx))
    return parts, wy, wx


def bilinear_sample(x: Tensor, coords) -> tuple[Tensor, np.ndarray]:
    """Sample (H,W,C) at continuous (y,x) coordinates, zero-filled outside.

    Returns the sampled tensor and a boolean validity map that is False
    wherever the coordinate itself leaves [0, H-1] x [0, W-1].
    """
    x = _as_tensor(x)
    cs = coords.data if isinstance(coords, Tensor) else np.asarray(coords, float)
    if cs.shape[-1] != 2:
        raise ValueError("coords must end in a (y,x) axis of size 2")
    H, W, C = x.data.shape
    ys, xs = cs[..., 0], cs[..., 1]
    parts, wy, wx = _bilinear_parts(x.data, ys, xs)
    out_data = np.zeros(ys.shape + (C,))
    for val, wgt, inb, yc, xc, dy, dx in parts:
        out_data += val * wgt[..., None]
    valid = (ys >= 0) & (ys <= H - 1) & (xs >= 0) & (xs <= W - 1)
    coords_t = coords if isinstance(coords, Tensor) else None

    def bwd(g):
        if x.requires_grad:
            dxd = np.zeros((H * W, C))
            for val, wgt, inb, yc, xc, dy, dx in parts:
                contrib = (g * wgt[..., None]) * inb[..., None]
                np.add.at(dxd, (yc * W + xc).ravel(), contrib.reshape(-1, C))
            _accum(x, dxd.reshape(H, W, C))
        if coords_t is not None and coords_t.requires_grad:
            v = {(p[5], p[6]): p[0] for p in parts}
            dvdy = (1.0 - wx)[..., None] * (v[(1, 0)] - v[(0, 0)]) + \
                wx[..., None] * (v[(1, 1)] - v[(0, 1)])
            dvdx = (1.0 - wy)[..., None] * (v[(0, 1)] - v[(0, 0)]) + \
                wy[..., None] * (v[(1, 1)] - v[(1, 0)])
            dc = np.stack([(g * dvdy).sum(-1), (g * dvdx).sum(-1)], axis=-1)
            _accum(coords_t, dc)

    parents = (x, coords_t) if coords_t is not None else (x,)
    return _make(out_data, parents, bwd), valid


def deformable_conv2d(x: Tensor, k: Tensor, offsets: Tensor, mask: Tensor) -> Tensor:
    """Modulated deformable 3x3-style convolution at stride 1, same size.

    Offsets are per pixel and tap-major as (dy, dx) pairs; the mask holds one
    modulation factor per tap. Fractional taps are sampled bilinearly with
    zero fill outside the grid. Squashing of the mask is the producer's job.
    """
    x, k = _as_tensor(x), _as_tensor(k)
    offsets, mask = _as_tensor(offsets), _as_tensor(mask)
    H, W, Cin = x.data.shape
    kh, kw, kcin, Cout = k.data.shape
    taps = kh * kw
    if kcin != Cin:
        raise ValueError("deformable kernel channel mismatch")
    if offsets.data.shape != (H, W, 2 * taps):
        raise ValueError(f"offsets must be (H,W,{2 * taps})")
    if mask.data.shape != (H, W, taps):
        raise ValueError(f"mask must be (H,W,{taps})")
    gy, gx = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float),
                         indexing="ij")
    tap_y = (np.arange(taps) // kw - kh // 2).astype(float)
    tap_x = (np.arange(taps) % kw - kw // 2).astype(float)
    off = offsets.data.reshape(H, W, taps, 2)
    # stacked tap coordinates, shape (taps, H, W)
    ys = gy[None] + tap_y[:, None, None] + np.moveaxis(off[:, :, :, 0], 2, 0)
    xs = gx[None] + tap_x[:, None, None] + np.moveaxis(off[:, :, :, 1], 2, 0)
    parts, wy, wx = _bilinear_parts(x.data, ys, xs)
    sampled = np.zeros((taps, H, W, Cin))
    for val, wgt, inb, yc, xc, dy, dx in parts:
        sampled += val * wgt[..., None]
    m = np.moveaxis(mask.data, 2, 0)[..., None]  # (taps, H, W, 1)
    kflat = k.data.reshape(taps, Cin, Cout)
    out_data = np.einsum("thwc,tco->hwo", sampled * m, kflat, optimize=True)

    def bwd(g):
        gv = np.einsum("hwo,tco->thwc", g, kflat, optimize=True)
        if k.requires_grad:
            dk = np.einsum("thwc,hwo->tco", sampled * m, g, optimize=True)
            _accum(k, dk.reshape(k.data.shape))
        if mask.requires_grad:
            dm = (sampled * gv).sum(-1)  # (taps, H, W)
            _accum(mask, np.moveaxis(dm, 0, 2))
        dv = gv * m
        if x.requires_grad:
            dx_flat = np.zeros((H * W, Cin))
            for val, wgt, inb, yc, xc, dy, dx in parts:
                contrib = (dv * wgt[..., None]) * inb[..., None]
                np.add.at(dx_flat, (yc * W + xc).ravel(),
                          contrib.reshape(-1, Cin))
            _accum(x, dx_flat.reshape(H, W, Cin))
        if offsets.requires_grad:
            v = {(p[5], p[6]): p[0] for p in parts}
            dvdy = (1.0 - wx)[..., None] * (v[(1, 0)] - v[(0, 0)]) + \
                wx[..., None] * (v[(1, 1)] - v[(0, 1)])
            dvdx = (1.0 - wy)[..., None] * (v[(0, 1)] - v[(0, 0)]) + \
                wy[..., None] * (v[(1, 1)] - v[(1, 0)])
            doff = np.stack([(dv * dvdy).sum(-1), (dv * dvdx).sum(-1)], axis=-1)
            _accum(offsets, np.moveaxis(doff, 0, 2).reshape(H, W, 2 * taps))

    return _make(out_data, (x, k, offsets, mask), bwd)


_UPSAMPLE_CACHE: dict = {}


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor, half-pixel aligned, edges clamped."""
    x = _as_tensor(x)
    H, W, C = x.data.shape
    key = (H, W, factor)
    if key not in _UPSAMPLE_CACHE:
        ys = np.clip((np.arange(H * factor) + 0.5) / factor - 0.5, 0, H - 1)
        xs = np.clip((np.arange(W * factor) + 0.5) / factor - 0.5, 0, W - 1)
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        y0 = np.floor(yy).astype(np.int64)
        x0 = np.floor(xx).astype(np.int64)
        y1 = np.minimum(y0 + 1, H - 1)
        x1 = np.minimum(x0 + 1, W - 1)
        wy = yy - y0
        wx = xx - x0
        _UPSAMPLE_CACHE[key] = (y0, x0, y1, x1, wy, wx)
    y0, x0, y1, x1, wy, wx = _UPSAMPLE_CACHE[key]
    w00 = ((1 - wy) * (1 - wx))[..., None]
    w01 = ((1 - wy) * wx)[..., None]
    w10 = (wy * (1 - wx))[..., None]
    w11 = (wy * wx)[..., None]
    out_data = (x.data[y0, x0] * w00 + x.data[y0, x1] * w01 +
                x.data[y1, x0] * w10 + x.data[y1, x1] * w11)

    def bwd(g):
        dxd = np.zeros((H * W, C))
        np.add.at(dxd, (y0 * W + x0).ravel(), (g * w00).reshape(-1, C))
        np.add.at(dxd, (y0 * W + x1).ravel(), (g * w01).reshape(-1, C))
        np.add.at(dxd, (y1 * W + x0).ravel(), (g * w10).reshape(-1, C))
        np.add.at(dxd, (y1 * W + x1).ravel(), (g * w11).reshape(-1, C))
        _accum(x, dxd.reshape(H, W, C))

    return _make(out_data, (x,), bwd)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def grad_check(fn, inputs, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of a scalar-valued fn to central differences.

    Returns the max relative error over every element of every input, with
    denominator max(|analytic|, |fd|, 1e-8). Raises on a non-finite loss.
    """
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in inputs]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    out = fn(*tensors)
    if not np.isfinite(out.data).all():
        raise ValueError("non-finite loss in grad_check")
    out.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        for t in tensors
    ]
    worst = 0.0
    for t, ana in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn(*tensors).data)
            flat[i] = orig - eps
            f_minus = float(fn(*tensors).data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            a = ana.reshape(-1)[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, rel)
    return worst
