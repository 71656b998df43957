"""Flow-guided event tensorization: temporal convolution features and the
coarse-to-fine estimator producing bidirectional motion-enhanced tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .events import EventTensorStack, reverse_frames
from .flow import FlowField
from .nn import MLP, Conv3d, Module, _he_init
from .tensor import Tensor


@dataclass
class TemporalFeatures:
    """Fine-grained event features at the working (H/4, W/4) grid."""

    data: Tensor
    n_frames: int
    n_bins: int


@dataclass
class MotionEnhancedTensor:
    """Dense motion-enhanced event representation, one temporal direction."""

    data: Tensor
    direction: str


class TemporalConvModule(Module):
    """Three sub-blocks of 3-D conv (2,3,3), per-slice 3x3 conv, relu, and
    2x2 average pooling in the first two; the last block collapses depth by
    its mean. Spatial size shrinks by 4 in total."""

    def __init__(self, in_bins: int, c_out: int, rng: np.random.Generator):
        c1 = max(4, c_out // 2)
        self.block_channels = [(in_bins, c1), (c1, c_out), (c_out, c_out)]
        self.temporal_convs = [Conv3d(ci, co, rng, kernel=(2, 3, 3))
                               for ci, co in self.block_channels]
        self.slice_convs = [Conv3d(co, co, rng, kernel=(1, 3, 3))
                            for _, co in self.block_channels]

    def __call__(self, stack: EventTensorStack) -> TemporalFeatures:
        if stack.n_frames < 2:
            raise ValueError("temporal kernel needs >=2 frames")
        x = stack.data
        for i in range(3):
            if x.shape[0] < 2:
                # replicate the last frame so the depth-2 kernel stays valid
                x = T.concat([x, T.narrow(x, 0, x.shape[0] - 1, 1)], axis=0)
            x = self.temporal_convs[i](x)
            x = T.relu(self.slice_convs[i](x))
            if i < 2:
                x = T.avg_pool2d(x, 2)
        h = T.tmean(x, axis=0)
        return TemporalFeatures(h, stack.n_frames, stack.n_bins)


class CoarseToFineEstimator(Module):
    """Coarse flow features modulated by fine event features in the frequency
    domain: MLP-lifted flow goes through an event-conditioned deformable
    convolution, both paths meet as a complex spectral product, and the
    inverse transform plus a flow skip yields the motion-enhanced tensor."""

    def __init__(self, channels: int, temporal_channels: int,
                 rng: np.random.Generator, kernel: int = 3):
        taps = kernel * kernel
        self.flow_lift = MLP(2, channels, channels, rng)
        self.offset_head = MLP(temporal_channels, temporal_channels, 2 * taps,
                               rng, zero_init_last=True)
        self.mask_head = MLP(temporal_channels, temporal_channels, taps,
                             rng, zero_init_last=True)
        self.kernel = Tensor(
            _he_init(rng, (kernel, kernel, channels, channels),
                     kernel * kernel * channels),
            requires_grad=True,
        )
        # zero-init the frequency branch's output so the flow skip dominates
        # at the start; the branch grows in as training shapes it
        self.out_mlp = MLP(channels, channels, channels, rng,
                           zero_init_last=True)
        self.skip_mlp = MLP(2, channels, channels, rng)

    def __call__(self, flow_pooled: Tensor, temporal: Tensor) -> Tensor:
        if flow_pooled.shape[:2] != temporal.shape[:2]:
            raise ValueError(
                f"flow grid {flow_pooled.shape[:2]} does not match "
                f"temporal grid {temporal.shape[:2]}"
            )
        flow_feats = self.flow_lift(flow_pooled)
        offsets = self.offset_head(temporal)
        mask = T.sigmoid(self.mask_head(temporal))
        conv_feats = T.deformable_conv2d(flow_feats, self.kernel, offsets, mask)
        spec_flow = T.rfft2(flow_feats)
        spec_conv = T.rfft2(conv_feats)
        product = spec_flow * spec_conv
        spatial = T.irfft2(product, flow_feats.shape[1])
        # the spectral product scales like H*W; fold that constant into the
        # output MLP's input so init magnitudes stay sane
        h, w = flow_feats.shape[:2]
        return self.out_mlp(spatial * (1.0 / (h * w))) + self.skip_mlp(flow_pooled)


def pool_flow(flow: FlowField, factor: int) -> np.ndarray:
    """Average-pool displacements to a coarser grid, rescaled to its units."""
    u = flow.u
    h, w, _ = u.shape
    if h % factor or w % factor:
        raise ValueError("flow size must divide by the pooling factor")
    pooled = u.reshape(h // factor, factor, w // factor, factor, 2).mean(axis=(1, 3))
    return pooled / factor


def build_bidirectional_met(stack: EventTensorStack,
                            flows: tuple[FlowField, FlowField],
                            temporal_module: TemporalConvModule,
                            estimator: CoarseToFineEstimator,
                            ) -> tuple[MotionEnhancedTensor, MotionEnhancedTensor]:
    """Forward MET from the stack as-is, backward MET from reversed frames;
    both directions share one estimator's parameters."""
    flow_f, flow_b = flows
    if flow_f.interval != flow_b.interval:
        raise ValueError("forward/backward flows must cover the same interval")
    h_fwd = temporal_module(stack)
    h_bwd = temporal_module(reverse_frames(stack))
    factor = stack.data.shape[1] // h_fwd.data.shape[0]
    m_f = estimator(Tensor(pool_flow(flow_f, factor)), h_fwd.data)
    m_b = estimator(Tensor(pool_flow(flow_b, factor)), h_bwd.data)
    return (MotionEnhancedTensor(m_f, "forward"),
            MotionEnhancedTensor(m_b, "backward"))
