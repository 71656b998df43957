"""Parameterized layers over the autodiff kernel.

A Module tracks child modules and parameter tensors through attribute
assignment; ``named_parameters`` yields stable dotted names used by the
optimizer and the checkpoint format. Initialization is driven entirely by a
caller-supplied numpy Generator so identical seeds give identical weights.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    def named_parameters(self, prefix: str = ""):
        for name in sorted(vars(self)):
            val = vars(self)[name]
            full = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


def _he_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Linear(Module):
    """Affine map over the last axis; arbitrary leading axes."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 zero_init: bool = False):
        if zero_init:
            w = np.zeros((c_in, c_out))
        else:
            w = _he_init(rng, (c_in, c_out), c_in)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = T.reshape(x, (-1, x.shape[-1]))
        out = T.matmul(flat, self.w) + self.b
        return T.reshape(out, lead + (self.w.shape[1],))


_ACTS = {"relu": T.relu, "sigmoid": T.sigmoid, "tanh": T.tanh, "identity": lambda t: t}


class MLP(Module):
    """Pointwise block: affine -> activation -> affine."""

    def __init__(self, c_in: int, c_hidden: int, c_out: int,
                 rng: np.random.Generator, act: str = "relu",
                 zero_init_last: bool = False):
        self.fc1 = Linear(c_in, c_hidden, rng)
        self.fc2 = Linear(c_hidden, c_out, rng, zero_init=zero_init_last)
        self._act = _ACTS[act]

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self._act(self.fc1(x)))


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 kernel: int = 3, stride: int = 1, padding: int = 1):
        fan = kernel * kernel * c_in
        self.w = Tensor(_he_init(rng, (kernel, kernel, c_in, c_out), fan),
                        requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.stride, self.padding) + self.b


class Conv3d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 kernel=(2, 3, 3), padding: int = 1):
        kd, kh, kw = kernel
        fan = kd * kh * kw * c_in
        self.w = Tensor(_he_init(rng, (kd, kh, kw, c_in, c_out), fan),
                        requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.w, self.padding) + self.b


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, rng: np.random.Generator,
                 kernel: int = 3, padding: int = 1):
        fan = kernel * kernel
        self.w = Tensor(_he_init(rng, (kernel, kernel, channels), fan),
                        requires_grad=True)
        self.b = Tensor(np.zeros(channels), requires_grad=True)
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.depthwise_conv2d(x, self.w, self.padding) + self.b


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Single-head attention over token rows; returns (output, weights)."""
    dk = q.shape[-1]
    scores = T.matmul(q, T.transpose(k, (1, 0))) * (1.0 / math.sqrt(dk))
    attn = T.softmax(scores, axis=1)
    return T.matmul(attn, v), attn


class CrossAttention(Module):
    """Single-head cross-attention: queries from one stream, keys/values from another."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.q = Linear(channels, channels, rng)
        self.k = Linear(channels, channels, rng)
        self.v = Linear(channels, channels, rng)

    def __call__(self, query_feats: Tensor, kv_feats: Tensor) -> Tensor:
        out, _ = scaled_dot_attention(self.q(query_feats), self.k(kv_feats),
                                      self.v(kv_feats))
        return out
