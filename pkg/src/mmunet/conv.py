"""Spatial kernels: cross-correlation conv2d, 2x2 max pooling, bilinear resize.

conv2d lowers each window to a column matrix so the contraction runs as one
batched BLAS matmul; its input gradient folds the column gradient back with
kh*kw strided slice-adds instead of a per-element scatter.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, DimensionError
from .tensor import Tensor, accumulate, make_node


def _im2col(xp, kh, kw, stride, out_h, out_w):
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(b, c, kh, kw, out_h, out_w),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
    )
    return view.reshape(b, c * kh * kw, out_h * out_w)


def conv2d(x, weight, stride=1, padding=0):
    """Cross-correlation of [B,C,H,W] with [O,C,kh,kw] kernels (zero padding)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects x[B,C,H,W] and weight[O,C,kh,kw]")
    b, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if cw != c:
        raise DimensionError(f"channel mismatch: input has {c}, weight expects {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError("kernel extents must be odd")
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise DimensionError(f"non-positive output extent {out_h}x{out_w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    wm = weight.data.reshape(o, c * kh * kw)
    out = np.matmul(wm[None], cols).reshape(b, o, out_h, out_w)

    def backward(g):
        gm = g.reshape(b, o, out_h * out_w)
        if weight.requires_grad:
            dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
            accumulate(weight, dw.reshape(o, c, kh, kw))
        if x.requires_grad:
            dcols = np.matmul(wm.T[None], gm).reshape(b, c, kh, kw, out_h, out_w)
            hp, wp = h + 2 * padding, w + 2 * padding
            dxp = np.zeros((b, c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                hi = i + stride * (out_h - 1) + 1
                for j in range(kw):
                    wj = j + stride * (out_w - 1) + 1
                    dxp[:, :, i:hi:stride, j:wj:stride] += dcols[:, :, i, j]
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + w]
            accumulate(x, dxp)

    return make_node(out, (x, weight), backward)


def maxpool2d(x):
    """2x2 max pooling with stride 2; extents must be even."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"maxpool2d needs even extents, got {h}x{w}")
    win = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        accumulate(x, dx.reshape(b, c, h, w))

    return make_node(out, (x,), backward)


_interp_cache = {}


def interp_matrix(n_in, n_out, dtype=np.float64):
    """Dense 1-D bilinear interpolation matrix [n_out, n_in].

    Uses half-pixel source centers; reduces to the identity when the extents
    match, so a same-size resize is exact.
    """
    key = (n_in, n_out, np.dtype(dtype).name)
    mat = _interp_cache.get(key)
    if mat is not None:
        return mat
    mat = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == n_out:
        np.fill_diagonal(mat, 1.0)
    else:
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        frac = src - i0
        i1 = np.minimum(i0 + 1, n_in - 1)
        rows = np.arange(n_out)
        np.add.at(mat, (rows, i0), 1.0 - frac)
        np.add.at(mat, (rows, i1), frac)
    _interp_cache[key] = mat
    return mat


def resize_bilinear_array(arr, out_h, out_w):
    """Plain-array bilinear resize of [..., H, W] (not differentiable)."""
    h, w = arr.shape[-2:]
    ar = interp_matrix(h, out_h, arr.dtype)
    ac = interp_matrix(w, out_w, arr.dtype)
    flat = arr.reshape(-1, h, w)
    out = np.matmul(np.matmul(ar[None], flat), ac.T[None])
    return out.reshape(arr.shape[:-2] + (out_h, out_w))


def bilinear_resize(x, out_h, out_w):
    """Differentiable bilinear resize of [B,C,H,W] to [B,C,out_h,out_w]."""
    b, c, h, w = x.shape
    ar = interp_matrix(h, out_h, x.dtype)
    ac = interp_matrix(w, out_w, x.dtype)
    flat = x.data.reshape(b * c, h, w)
    out = np.matmul(np.matmul(ar[None], flat), ac.T[None])

    def backward(g):
        gf = g.reshape(b * c, out_h, out_w)
        dx = np.matmul(np.matmul(ar.T[None], gf), ac[None])
        accumulate(x, dx.reshape(b, c, h, w))

    return make_node(out.reshape(b, c, out_h, out_w), (x,), backward)
