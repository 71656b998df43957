"""Temporal fusion: deformable alignment of both registered streams onto the
image features, gated mixing, and a depthwise-separable fusion with skip."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import MLP, DepthwiseConv2d, Linear, Module, _he_init
from .tensor import Tensor


class TemporalFusionModule(Module):
    """Aligns registered features to the image grid and fuses them.

    Each direction produces offsets (tanh-capped at ``max_offset`` pixels)
    and sigmoid masks for one shared deformable kernel applied to the image
    features. The aligned branches are gated by an image-derived MLP, stacked
    with the gate itself, and passed through depthwise 3x3 + pointwise 1x1
    convolutions before the residual skip back onto the image features.
    """

    def __init__(self, channels: int, rng: np.random.Generator,
                 max_offset: float = 4.0, bidirectional: bool = True,
                 kernel: int = 3):
        taps = kernel * kernel
        self.offset_fwd = MLP(channels, channels, 2 * taps, rng,
                              zero_init_last=True)
        self.mask_fwd = MLP(channels, channels, taps, rng, zero_init_last=True)
        self.bidirectional = bidirectional
        if bidirectional:
            self.offset_bwd = MLP(channels, channels, 2 * taps, rng,
                                  zero_init_last=True)
            self.mask_bwd = MLP(channels, channels, taps, rng,
                                zero_init_last=True)
        self.kernel = Tensor(
            _he_init(rng, (kernel, kernel, channels, channels),
                     kernel * kernel * channels),
            requires_grad=True,
        )
        self.gate_mlp = MLP(channels, channels, channels, rng)
        groups = 3 if bidirectional else 2
        self.depthwise = DepthwiseConv2d(groups * channels, rng)
        self.pointwise = Linear(groups * channels, channels, rng)
        self.max_offset = max_offset

    def _align(self, registered: Tensor, img: Tensor, offset_mlp: MLP,
               mask_mlp: MLP) -> Tensor:
        offsets = T.tanh(offset_mlp(registered)) * self.max_offset
        mask = T.sigmoid(mask_mlp(registered))
        return T.deformable_conv2d(img, self.kernel, offsets, mask)

    def __call__(self, reg_fwd: Tensor, reg_bwd: Tensor | None,
                 img: Tensor) -> Tensor:
        if reg_fwd.shape[:2] != img.shape[:2]:
            raise ValueError("registered and image features must share one grid")
        gate = self.gate_mlp(img)
        aligned_f = self._align(reg_fwd, img, self.offset_fwd, self.mask_fwd)
        if self.bidirectional:
            if reg_bwd is None:
                raise ValueError("bidirectional fusion needs the backward stream")
            aligned_b = self._align(reg_bwd, img, self.offset_bwd, self.mask_bwd)
            stacked = T.concat([aligned_f * gate, aligned_b * gate, gate], axis=-1)
        else:
            stacked = T.concat([aligned_f * gate, gate], axis=-1)
        return self.pointwise(self.depthwise(stacked)) + img

    def tie_directions(self) -> None:
        """Test hook: make the fusion symmetric under swapping the streams.

        Ties the backward offset/mask heads to the forward ones and copies the
        depthwise/pointwise weights of the second channel group onto the first
        group's values.
        """
        if not self.bidirectional:
            raise ValueError("nothing to tie in a unidirectional module")
        for src, dst in ((self.offset_fwd, self.offset_bwd),
                         (self.mask_fwd, self.mask_bwd)):
            for (_, ps), (_, pd) in zip(src.named_parameters(),
                                        dst.named_parameters()):
                pd.data = ps.data.copy()
        c = self.kernel.shape[-1]
        self.depthwise.w.data[:, :, c:2 * c] = self.depthwise.w.data[:, :, :c]
        self.depthwise.b.data[c:2 * c] = self.depthwise.b.data[:c]
        self.pointwise.w.data[c:2 * c, :] = self.pointwise.w.data[:c, :]
