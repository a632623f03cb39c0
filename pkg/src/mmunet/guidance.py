"""Attention-style guidance blocks used around the decoder.

CBAM gates a feature map with channel attention (shared two-layer perceptron
over pooled channel vectors) followed by spatial attention (7x7 convolution
over channelwise average/max maps).  The reverse-guided fusion block
suppresses regions a previous prediction already explained and spends its
capacity on the residual, mostly boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .nn import Conv2d, Linear, Module, PointwiseConv
from .sstate import MmcLayer, ScanDirection, SsmParams, make_scan_order, ssm_apply_2d
from .tensor import Tensor


class ChannelAttention(Module):
    def __init__(self, channels, rng, dtype=np.float32, reduction=16, floor=4):
        hidden = max(channels // reduction, min(floor, channels))
        self.fc1 = Linear(channels, hidden, rng, dtype=dtype, bias=False)
        self.fc2 = Linear(hidden, channels, rng, dtype=dtype, bias=False)

    def _mlp(self, v):
        return self.fc2(T.relu(self.fc1(v)))

    def forward(self, x):
        b, c, h, w = x.shape
        flat = T.reshape(x, (b, c, h * w))
        avg = T.tmean(flat, axis=2)
        mx = T.tmax(flat, axis=2)
        gate = T.sigmoid(T.add(self._mlp(avg), self._mlp(mx)))
        return T.reshape(gate, (b, c, 1, 1))


class SpatialAttention(Module):
    def __init__(self, rng, dtype=np.float32, kernel=7):
        self.conv = Conv2d(2, 1, kernel, rng, padding=(kernel - 1) // 2,
                           dtype=dtype, bias=False)

    def forward(self, x):
        avg = T.tmean(x, axis=1, keepdims=True)
        mx = T.tmax(x, axis=1, keepdims=True)
        return T.sigmoid(self.conv(T.concat([avg, mx], axis=1)))


class CbamBlock(Module):
    """Channel-then-spatial multiplicative gating; output magnitude <= |x|."""

    def __init__(self, channels, rng, dtype=np.float32, reduction=16, spatial_kernel=7):
        self.channel = ChannelAttention(channels, rng, dtype=dtype, reduction=reduction)
        self.spatial = SpatialAttention(rng, dtype=dtype, kernel=spatial_kernel)

    def forward(self, x):
        x = T.mul(x, self.channel(x))
        return T.mul(x, self.spatial(x))


def cbam(x, block):
    """Functional alias for a CBAM pass."""
    return block.forward(x)


def reverse_mask(r_prev, f_deep):
    """Suppress already-explained regions: (1 - sigmoid(r_prev)) * f_deep.

    ``r_prev`` is [B,1,H,W] logits and broadcasts over the feature channels;
    confidently positive logits zero the feature out, steering later layers
    toward residual and boundary regions.
    """
    if r_prev.shape[-2:] != f_deep.shape[-2:]:
        raise DimensionError(
            f"spatial extents differ: {r_prev.shape[-2:]} vs {f_deep.shape[-2:]}")
    return T.mul(T.sub(1.0, T.sigmoid(r_prev)), f_deep)


@dataclass
class RssgInputs:
    """The three aligned inputs of a reverse-guided fusion block."""

    f_edge: Tensor
    f_deep: Tensor
    r_prev: Tensor

    def __post_init__(self):
        he, we = self.f_edge.shape[-2:]
        if self.f_deep.shape[-2:] != (he, we) or self.r_prev.shape[-2:] != (he, we):
            raise DimensionError("edge, deep and reverse inputs must share spatial extents")


class RssgBlock(Module):
    """Reverse-guided fusion of the edge feature with a deep feature.

    Pipeline: mask the deep feature with the reversed previous prediction,
    concatenate with the edge feature, mix with a 3x3-kernel MMC layer, run a
    forward row-major selective scan, gate with a per-position two-layer
    perceptron (sigmoid output), and add the deep feature back as a residual.
    With all non-residual parameters zeroed the block is an exact pass-through
    of the deep feature.
    """

    def __init__(self, channels, rng, dtype=np.float32, state_dim=8,
                 kernel_len=3, use_mmc=True):
        if use_mmc:
            self.mix = MmcLayer(2 * channels, channels, rng, kernel_len=kernel_len,
                                state_dim=state_dim, dtype=dtype)
        else:
            self.mix = PointwiseConv(2 * channels, channels, rng, dtype=dtype)
        self.ssm = SsmParams(channels, state_dim, rng, dtype=dtype)
        self.fc1 = Linear(channels, channels, rng, dtype=dtype)
        self.fc2 = Linear(channels, channels, rng, dtype=dtype)
        self.channels = channels
        self._orders = {}

    def _order(self, h, w):
        from .morph import Axis

        key = (h, w)
        if key not in self._orders:
            self._orders[key] = make_scan_order(Axis.X_EXTEND, ScanDirection.FORWARD, h, w)
        return self._orders[key]

    def forward(self, inputs):
        f_edge, f_deep, r_prev = inputs.f_edge, inputs.f_deep, inputs.r_prev
        b, c, h, w = f_deep.shape
        r = reverse_mask(r_prev, f_deep)
        f_c = self.mix(T.concat([f_edge, r], axis=1))
        f_m = ssm_apply_2d(f_c, self._order(h, w), self.ssm)
        seq = T.transpose(T.reshape(f_m, (b, c, h * w)), (0, 2, 1))
        gate = T.sigmoid(self.fc2(T.relu(self.fc1(seq))))
        f_l = T.reshape(T.transpose(gate, (0, 2, 1)), (b, c, h, w))
        return T.add(T.mul(T.mul(f_l, f_m), f_c), f_deep)


def rssg_forward(inputs, block):
    """Functional alias for one reverse-guided fusion pass."""
    return block.forward(inputs)


class ConcatFuse(Module):
    """Ablation stand-in: plain concatenation of the three inputs + 3x3 conv."""

    def __init__(self, channels, rng, dtype=np.float32):
        self.conv = Conv2d(2 * channels + 1, channels, 3, rng, padding=1, dtype=dtype)

    def forward(self, inputs):
        cat = T.concat([inputs.f_edge, inputs.f_deep, inputs.r_prev], axis=1)
        return self.conv(cat)
