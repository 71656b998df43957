"""Bidirectional registration: frequency-domain spatial and channel attention
followed by cross-attention between image features and the event stream's
motion-enhanced tensors. Both directions share one set of weights."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .met import MotionEnhancedTensor
from .nn import MLP, Conv2d, CrossAttention, Module
from .tensor import ComplexPair, Tensor


class RegistrationModule(Module):
    """Registers one motion-enhanced tensor against image features.

    Spatial step: a sigmoid mask over the frequency grid (from the joint
    MET/image representation) gates the image features' spectrum. Channel
    step: a per-channel sigmoid gate from adaptive average pooling scales the
    spectrum again. A final single-head cross-attention uses image features
    as queries and the channel-correlated features as keys/values.

    ``force_spatial_mask`` / ``force_channel_mask`` are test hooks that
    replace the computed masks with fixed arrays.
    """

    def __init__(self, channels: int, rng: np.random.Generator,
                 max_tokens: int = 4096):
        self.joint_mlp = MLP(2 * channels, channels, channels, rng)
        self.img_mlp = MLP(channels, channels, channels, rng)
        self.freq_conv = Conv2d(2 * channels, 2 * channels, rng)
        self.chan_mlp = MLP(2 * channels, channels, channels, rng)
        self.attn = CrossAttention(channels, rng)
        self.max_tokens = max_tokens
        self.force_spatial_mask: np.ndarray | None = None
        self.force_channel_mask: np.ndarray | None = None

    def spatial_attention(self, met: Tensor, img: Tensor) -> Tensor:
        if met.shape[:2] != img.shape[:2]:
            raise ValueError("MET and image features must share one grid")
        joint = T.concat([met, img], axis=-1)
        freq_met = T.rfft2(self.joint_mlp(joint)).layout()
        if self.force_spatial_mask is not None:
            mask = Tensor(np.broadcast_to(self.force_spatial_mask,
                                          freq_met.shape).copy())
        else:
            mask = T.sigmoid(T.relu(self.freq_conv(freq_met)))
        spec_img = T.rfft2(self.img_mlp(img)).layout()
        return T.irfft2(ComplexPair.from_layout(mask * spec_img), img.shape[1])

    def channel_attention(self, spatial_feats: Tensor, met: Tensor,
                          img: Tensor) -> Tensor:
        joint = T.concat([met, img], axis=-1)
        pre = spatial_feats + self.chan_mlp(joint)
        if self.force_channel_mask is not None:
            gate = Tensor(np.asarray(self.force_channel_mask, dtype=float)
                          .reshape(1, 1, -1))
        else:
            gate = T.sigmoid(T.relu(T.global_avg_pool(pre)))
        spec = T.rfft2(spatial_feats).layout()
        gate_layout = T.concat([gate, gate], axis=-1)
        return T.irfft2(ComplexPair.from_layout(spec * gate_layout),
                        spatial_feats.shape[1])

    def register(self, met: Tensor, img: Tensor) -> Tensor:
        h, w = img.shape[:2]
        if h * w > self.max_tokens:
            raise ValueError(
                f"{h * w} attention tokens exceed the {self.max_tokens} guard; "
                "use a smaller grid"
            )
        f_s = self.spatial_attention(met, img)
        f_c = self.channel_attention(f_s, met, img)
        c = img.shape[-1]
        queries = T.reshape(img, (h * w, c))
        keys_values = T.reshape(f_c, (h * w, c))
        out = self.attn(queries, keys_values)
        return T.reshape(out, (h, w, c))

    def __call__(self, m_f: MotionEnhancedTensor, m_b: MotionEnhancedTensor,
                 img: Tensor) -> tuple[Tensor, Tensor]:
        return self.register(m_f.data, img), self.register(m_b.data, img)
