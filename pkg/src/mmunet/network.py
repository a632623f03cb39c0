"""Five-stage residual encoder with guided decoder and fused sigmoid head.

Encoder stage i produces a feature at H/2^i x W/2^i with channel widths
(64, 64, 128, 256, 512) scaled by the width multiplier.  The three deepest
features are unified to the shallow width, the shallowest feature runs
through CBAM to become the edge feature, and four decoder stages walk back
up, each guided by the edge feature and the previous stage's side
prediction.  All five side logits are resized to the input grid and merged
to one channel for the final probability map.

Every pointwise channel projection in the trunk (encoder shortcut
projections, channel unification, the skip reduction and the fusion head)
is a morph Mamba layer unless ``use_mmc`` is off, in which case each becomes
a plain 1x1 convolution of identical width.  ``use_rssg`` swaps the guided
fusion blocks for plain concatenation + convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .conv import bilinear_resize, maxpool2d
from .errors import ConfigError, DimensionError
from .guidance import CbamBlock, ConcatFuse, RssgBlock, RssgInputs
from .nn import Conv2d, GroupNorm, Module, PointwiseConv, avg_pool2x2
from .sstate import MmcLayer
from .tensor import Tensor


@dataclass
class NetworkConfig:
    width_mult: float = 1.0
    input_hw: tuple = (64, 64)
    use_mmc: bool = True
    use_rssg: bool = True
    ssm_state_dim: int = 8
    bidirectional_scan: bool = False
    seed: int = 0

    def __post_init__(self):
        h, w = self.input_hw
        if h % 32 or w % 32:
            raise ConfigError(f"input extents must be divisible by 32, got {h}x{w}")
        if self.width_mult <= 0:
            raise ConfigError("width_mult must be positive")
        if self.ssm_state_dim < 1:
            raise ConfigError("ssm_state_dim must be >= 1")

    def stage_channels(self):
        """Channel widths of the five encoder stages (floor 4)."""
        base = (64, 64, 128, 256, 512)
        return tuple(max(4, int(round(c * self.width_mult))) for c in base)


@dataclass
class ForwardArtifacts:
    """Everything one forward pass produces, shallowest to deepest."""

    encoder: tuple
    unified: tuple
    edge: Tensor
    side_logits: list
    prob: Tensor


class BasicBlock(Module):
    def __init__(self, in_ch, out_ch, rng, stride=1, dtype=np.float32,
                 use_mmc=True, state_dim=8):
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, stride=stride, padding=1,
                            dtype=dtype, bias=False)
        self.gn1 = GroupNorm(out_ch, dtype=dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, padding=1, dtype=dtype, bias=False)
        self.gn2 = GroupNorm(out_ch, dtype=dtype)
        self.stride = stride
        if stride != 1 or in_ch != out_ch:
            if use_mmc:
                self.proj = MmcLayer(in_ch, out_ch, rng, state_dim=state_dim, dtype=dtype)
            else:
                self.proj = PointwiseConv(in_ch, out_ch, rng, dtype=dtype)
            self.gn_proj = GroupNorm(out_ch, dtype=dtype)
        else:
            self.proj = None

    def forward(self, x):
        y = self.gn2(self.conv2(T.relu(self.gn1(self.conv1(x)))))
        if self.proj is None:
            shortcut = x
        else:
            shortcut = x if self.stride == 1 else avg_pool2x2(x)
            shortcut = self.gn_proj(self.proj(shortcut))
        return T.relu(T.add(y, shortcut))


class RefineBlock(Module):
    def __init__(self, in_ch, out_ch, rng, dtype=np.float32):
        self.conv = Conv2d(in_ch, out_ch, 3, rng, padding=1, dtype=dtype, bias=False)
        self.gn = GroupNorm(out_ch, dtype=dtype)

    def forward(self, x):
        return T.relu(self.gn(self.conv(x)))


def _stage(in_ch, out_ch, depth, rng, stride, dtype, use_mmc, state_dim):
    blocks = [BasicBlock(in_ch, out_ch, rng, stride=stride, dtype=dtype,
                         use_mmc=use_mmc, state_dim=state_dim)]
    for _ in range(depth - 1):
        blocks.append(BasicBlock(out_ch, out_ch, rng, dtype=dtype,
                                 use_mmc=use_mmc, state_dim=state_dim))
    return blocks


class MMUNet(Module):
    def __init__(self, config, dtype=np.float32):
        rng = np.random.default_rng(config.seed)
        c1, c2, c3, c4, c5 = config.stage_channels()
        u = c1
        n = config.ssm_state_dim
        mmc = config.use_mmc
        self.config = config

        def pointwise(in_ch, out_ch):
            if mmc:
                return MmcLayer(in_ch, out_ch, rng, state_dim=n, dtype=dtype,
                                bidirectional=config.bidirectional_scan)
            return PointwiseConv(in_ch, out_ch, rng, dtype=dtype)

        self.stem = Conv2d(3, c1, 7, rng, stride=2, padding=3, dtype=dtype, bias=False)
        self.stem_gn = GroupNorm(c1, dtype=dtype)
        self.layer1 = _stage(c1, c2, 3, rng, 1, dtype, mmc, n)
        self.layer2 = _stage(c2, c3, 4, rng, 2, dtype, mmc, n)
        self.layer3 = _stage(c3, c4, 6, rng, 2, dtype, mmc, n)
        self.layer4 = _stage(c4, c5, 3, rng, 2, dtype, mmc, n)

        self.unify3 = pointwise(c3, u)
        self.unify4 = pointwise(c4, u)
        self.unify5 = pointwise(c5, u)
        self.reduce2 = pointwise(c2, u)
        self.cbam = CbamBlock(c1, rng, dtype=dtype)

        if config.use_rssg:
            self.fuse = [RssgBlock(u, rng, dtype=dtype, state_dim=n, use_mmc=mmc)
                         for _ in range(4)]
        else:
            self.fuse = [ConcatFuse(u, rng, dtype=dtype) for _ in range(4)]
        self.refine = [RefineBlock(2 * u, u, rng, dtype=dtype) for _ in range(4)]
        self.heads = [Conv2d(u, 1, 1, rng, dtype=dtype) for _ in range(5)]
        self.fusion = pointwise(5, 1)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError("input must be [B,3,H,W]")
        h, w = x.shape[2], x.shape[3]
        if h % 32 or w % 32:
            raise ConfigError(f"input extents must be divisible by 32, got {h}x{w}")

        f1 = T.relu(self.stem_gn(self.stem(x)))
        f = maxpool2d(f1)
        for blk in self.layer1:
            f = blk(f)
        f2 = f
        for blk in self.layer2:
            f = blk(f)
        f3 = f
        for blk in self.layer3:
            f = blk(f)
        f4 = f
        for blk in self.layer4:
            f = blk(f)
        f5 = f

        f3u, f4u, f5u = self.unify3(f3), self.unify4(f4), self.unify5(f5)
        edge = self.cbam(f1)

        side = [self.heads[0](f5u)]
        skips = {4: f4u, 3: f3u, 2: self.reduce2(f2), 1: edge}
        d = f5u
        for idx, stage in enumerate((4, 3, 2, 1)):
            skip = skips[stage]
            sh, sw = skip.shape[2], skip.shape[3]
            d_up = bilinear_resize(d, sh, sw)
            z_up = bilinear_resize(side[-1], sh, sw)
            edge_rs = bilinear_resize(edge, sh, sw)
            fused = self.fuse[idx](RssgInputs(f_edge=edge_rs, f_deep=skip, r_prev=z_up))
            d = self.refine[idx](T.concat([d_up, fused], axis=1))
            side.append(self.heads[idx + 1](d))

        ups = [bilinear_resize(z, h, w) for z in side]
        prob = T.sigmoid(self.fusion(T.concat(ups, axis=1)))
        return ForwardArtifacts(encoder=(f1, f2, f3, f4, f5),
                                unified=(f3u, f4u, f5u),
                                edge=edge, side_logits=side, prob=prob)


def count_params(config):
    """Exact learnable-scalar count for a configuration."""
    return MMUNet(config).num_params()
