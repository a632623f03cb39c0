"""Morph kernel sampling: offset prediction, coordinate bending, bilinear reads.

A morph kernel is a 1-D kernel of odd length K laid along one image axis.
The extension axis steps by whole pixels away from the center while the
orthogonal coordinate drifts by a running sum of learned sub-pixel offsets,
letting the receptive field bend along thin curvilinear structures.  The
plus and minus arms accumulate their own offset sequences, so an offset
field carries K-1 channels per position.

Slot order everywhere is -half_span .. +half_span, center in the middle.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .conv import conv2d
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor, accumulate, make_node


class Axis(enum.Enum):
    X_EXTEND = "x"  # integer steps along rows, offsets drift the column
    Y_EXTEND = "y"  # integer steps along columns, offsets drift the row


@dataclass
class KernelGeometry:
    kernel_len: int
    axis: Axis

    def __post_init__(self):
        if self.kernel_len < 3 or self.kernel_len % 2 == 0:
            raise ConfigError(f"kernel_len must be odd and >= 3, got {self.kernel_len}")

    @property
    def half_span(self):
        return (self.kernel_len - 1) // 2


@dataclass
class OffsetField:
    """Per-position displacements, one channel per non-center kernel slot.

    Channel layout: the first half_span channels are the plus arm (steps
    +1..+half_span), the rest are the minus arm (steps -1..-half_span).
    Every value lies in [-1, 1].
    """

    values: Tensor
    axis: Axis

    def __post_init__(self):
        if self.values.ndim != 4:
            raise DimensionError("offset values must be [B, K-1, H, W]")
        if self.values.shape[1] % 2 != 0:
            raise DimensionError("offset field needs an even slot-channel count")
        peak = float(np.abs(self.values.data).max()) if self.values.size else 0.0
        if peak > 1.0 + 1e-6:
            raise ContractError(f"offsets must lie in [-1, 1], found |delta|={peak:.4f}")


@dataclass
class CoordinateSet:
    """Fractional (row, col) sample locations, stored as two [B,K,H,W] tensors."""

    rows: Tensor
    cols: Tensor
    axis: Axis | None = None

    def pairs(self):
        """Stacked [B,K,H,W,2] (row, col) array view for inspection."""
        return np.stack([self.rows.data, self.cols.data], axis=-1)


def base_grid(height, width):
    """Integer center grid as a [1,1,H,W] coordinate set."""
    if height < 1 or width < 1:
        raise ContractError("grid extents must be >= 1")
    rows = np.broadcast_to(np.arange(height, dtype=np.float64)[:, None], (height, width))
    cols = np.broadcast_to(np.arange(width, dtype=np.float64)[None, :], (height, width))
    return CoordinateSet(
        rows=Tensor(rows[None, None].copy()),
        cols=Tensor(cols[None, None].copy()),
        axis=None,
    )


def predict_offsets(features, proj_weight, proj_bias=None, axis=Axis.X_EXTEND):
    """Project features to K-1 offset channels through a 1x1 map, then tanh.

    The tanh squash keeps every displacement inside [-1, 1] while staying
    differentiable end to end.
    """
    if proj_weight.ndim == 2:
        proj_weight = T.reshape(proj_weight, proj_weight.shape + (1, 1))
    raw = conv2d(features, proj_weight)
    if proj_bias is not None:
        raw = T.add(raw, T.reshape(proj_bias, (1, -1, 1, 1)))
    return OffsetField(values=T.tanh(raw), axis=axis)


def morph_coordinates(centers, offsets, geom):
    """Bend the kernel: integer steps on the extension axis, summed drifts off it.

    Slot +c sits c whole pixels from the center along the extension axis and
    carries the running sum of the plus arm's first c offsets on the other
    axis; slot -c mirrors this with the minus arm's own running sum.
    """
    if offsets.axis != geom.axis:
        raise ContractError("offset field axis does not match kernel geometry")
    c_max = geom.half_span
    vals = offsets.values
    b, slots, h, w = vals.shape
    if slots != geom.kernel_len - 1:
        raise DimensionError(f"offset field has {slots} slot channels, kernel needs {geom.kernel_len - 1}")
    dtype = vals.dtype

    base_r = centers.rows.data.astype(dtype)
    base_c = centers.cols.data.astype(dtype)

    plus = T.cumsum(vals[:, :c_max], axis=1)
    minus = T.flip(T.cumsum(vals[:, c_max:], axis=1), axis=1)
    zero_center = Tensor(np.zeros((b, 1, h, w), dtype=dtype))
    drift = T.concat([minus, zero_center, plus], axis=1)

    steps = np.arange(-c_max, c_max + 1, dtype=dtype).reshape(1, -1, 1, 1)

    if geom.axis is Axis.X_EXTEND:
        rows = Tensor(np.broadcast_to(base_r + steps, (b, geom.kernel_len, h, w)).copy())
        cols = T.add(drift, Tensor(base_c))
        return CoordinateSet(rows=rows, cols=cols, axis=geom.axis)

    cols = Tensor(np.broadcast_to(base_c + steps, (b, geom.kernel_len, h, w)).copy())
    rows = T.add(drift, Tensor(base_r))
    return CoordinateSet(rows=rows, cols=cols, axis=geom.axis)


def bilinear_sample(feature, coords):
    """Read the feature map at fractional locations with hat-function weights.

    Out-of-range coordinates are clamped to the border before the 4-neighbor
    lookup (border replication), which keeps the weights summing to 1 at the
    edges.  Differentiable with respect to the feature values and, where not
    clamped, the coordinates.
    """
    rows, cols = coords.rows, coords.cols
    b, c, h, w = feature.shape
    if rows.shape != cols.shape or rows.ndim != 4 or rows.shape[0] != b:
        raise DimensionError("coordinate tensors must be [B,K,H',W'] matching the feature batch")
    k = rows.shape[1]
    oh, ow = rows.shape[2], rows.shape[3]
    n = k * oh * ow

    r = np.clip(rows.data, 0.0, h - 1.0)
    cc = np.clip(cols.data, 0.0, w - 1.0)
    row_free = ((rows.data > 0.0) & (rows.data < h - 1.0)).reshape(b, n)
    col_free = ((cols.data > 0.0) & (cols.data < w - 1.0)).reshape(b, n)

    y0 = np.floor(r).astype(np.int64)
    x0 = np.floor(cc).astype(np.int64)
    fy = (r - y0).reshape(b, n)
    fx = (cc - x0).reshape(b, n)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y0f, x0f = y0.reshape(b, n), x0.reshape(b, n)
    y1f, x1f = y1.reshape(b, n), x1.reshape(b, n)

    flat = feature.data.reshape(b, c, h * w)
    pos_all = np.concatenate([y0f * w + x0f, y0f * w + x1f,
                              y1f * w + x0f, y1f * w + x1f], axis=1)
    gathered = np.take_along_axis(flat, pos_all[:, None, :], axis=2)
    v00, v01, v10, v11 = np.split(gathered, 4, axis=2)

    wy = fy[:, None, :]
    wx = fx[:, None, :]
    out = ((1 - wy) * (1 - wx) * v00 + (1 - wy) * wx * v01
           + wy * (1 - wx) * v10 + wy * wx * v11)

    def backward(g):
        gf = g.reshape(b, c, n)
        if feature.requires_grad:
            base = (np.arange(b, dtype=np.int64)[:, None, None] * c
                    + np.arange(c, dtype=np.int64)[None, :, None]) * (h * w)
            idx = np.concatenate([
                (base + (y0f * w + x0f)[:, None, :]).ravel(),
                (base + (y0f * w + x1f)[:, None, :]).ravel(),
                (base + (y1f * w + x0f)[:, None, :]).ravel(),
                (base + (y1f * w + x1f)[:, None, :]).ravel(),
            ])
            wts = np.concatenate([
                (gf * (1 - wy) * (1 - wx)).ravel(),
                (gf * (1 - wy) * wx).ravel(),
                (gf * wy * (1 - wx)).ravel(),
                (gf * wy * wx).ravel(),
            ])
            df = np.bincount(idx, weights=wts, minlength=b * c * h * w)
            accumulate(feature, df.reshape(b, c, h, w).astype(g.dtype))
        if rows.requires_grad or cols.requires_grad:
            dfy = (gf * ((v10 - v00) * (1 - wx) + (v11 - v01) * wx)).sum(axis=1)
            dfx = (gf * ((v01 - v00) * (1 - wy) + (v11 - v10) * wy)).sum(axis=1)
            if rows.requires_grad:
                accumulate(rows, (dfy * row_free).reshape(rows.shape))
            if cols.requires_grad:
                accumulate(cols, (dfx * col_free).reshape(cols.shape))

    node = make_node(out.reshape(b, c, k, oh, ow), (feature, rows, cols), backward)
    return node


def axis_aggregate(sampled, kernel_weights):
    """Contract kernel slots and input channels jointly into output channels.

    ``kernel_weights`` has shape [C_out, C, K]: one learnable weight per
    (output channel, input channel, slot), shared across spatial positions.
    """
    b, c, k, h, w = sampled.shape
    if kernel_weights.ndim != 3 or kernel_weights.shape[1] != c or kernel_weights.shape[2] != k:
        raise DimensionError(
            f"kernel weights must be [C_out, {c}, {k}], got {tuple(kernel_weights.shape)}")
    sf = sampled.data.reshape(b, c, k, h * w)
    wd = kernel_weights.data
    out = np.einsum("ock,bckp->bop", wd, sf, optimize=True)

    def backward(g):
        gf = g.reshape(b, -1, h * w)
        if kernel_weights.requires_grad:
            accumulate(kernel_weights, np.einsum("bop,bckp->ock", gf, sf, optimize=True))
        if sampled.requires_grad:
            ds = np.einsum("ock,bop->bckp", wd, gf, optimize=True)
            accumulate(sampled, ds.reshape(b, c, k, h, w))

    return make_node(out.reshape(b, -1, h, w), (sampled, kernel_weights), backward)
