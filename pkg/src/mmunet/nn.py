"""Parameter containers and the handful of standard layers the network uses."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .conv import conv2d
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor registered for optimization."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Minimal parameter tree.

    Attributes that are Parameters, Modules, or lists of Modules are
    discovered in definition order, which keeps parameter naming and
    checkpoint layout deterministic.
    """

    def named_parameters(self, prefix=""):
        for name, value in self.__dict__.items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{path}.{i}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def to_dtype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_params(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming(rng, shape, fan_in, dtype):
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Linear(Module):
    """Affine map on the trailing axis; weight stored as [in, out]."""

    def __init__(self, in_features, out_features, rng, dtype=np.float32, bias=True):
        self.weight = Parameter(kaiming(rng, (in_features, out_features), in_features, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None
        self.in_features = in_features
        self.out_features = out_features

    def forward(self, x):
        lead = x.shape[:-1]
        flat = T.reshape(x, (-1, self.in_features))
        y = T.matmul(flat, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return T.reshape(y, lead + (self.out_features,))


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0,
                 dtype=np.float32, bias=True, zero_init=False):
        fan_in = in_ch * kernel * kernel
        if zero_init:
            w = np.zeros((out_ch, in_ch, kernel, kernel), dtype=dtype)
        else:
            w = kaiming(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        y = conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            y = T.add(y, T.reshape(self.bias, (1, -1, 1, 1)))
        return y


class PointwiseConv(Module):
    """1x1 channel projection, the plain counterpart of an MMC layer."""

    def __init__(self, in_ch, out_ch, rng, dtype=np.float32, bias=True):
        self.weight = Parameter(kaiming(rng, (out_ch, in_ch, 1, 1), in_ch, dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype)) if bias else None

    def forward(self, x):
        y = conv2d(x, self.weight)
        if self.bias is not None:
            y = T.add(y, T.reshape(self.bias, (1, -1, 1, 1)))
        return y


def avg_pool2x2(x):
    """2x2 average pooling with stride 2 (extents must be even)."""
    b, c, h, w = x.shape
    win = T.reshape(x, (b, c, h // 2, 2, w // 2, 2))
    return T.tmean(T.tmean(win, axis=5), axis=3)


def _group_count(channels):
    for g in (4, 2):
        if channels % g == 0:
            return g
    return 1


def group_norm(x, weight, bias, groups, eps=1e-5):
    """Fused group normalization with per-channel affine."""
    from .tensor import accumulate, make_node

    b, c, h, w = x.shape
    s = (c // groups) * h * w
    xg = x.data.reshape(b, groups, s)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    istd = 1.0 / np.sqrt((xc * xc).mean(axis=2, keepdims=True) + eps)
    xhat = (xc * istd).reshape(b, c, h, w)
    wc = weight.data.reshape(1, c, 1, 1)
    out = xhat * wc + bias.data.reshape(1, c, 1, 1)

    def backward(g):
        if bias.requires_grad:
            accumulate(bias, g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            accumulate(weight, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxh = (g * wc).reshape(b, groups, s)
            xh = xhat.reshape(b, groups, s)
            m1 = gxh.mean(axis=2, keepdims=True)
            m2 = (gxh * xh).mean(axis=2, keepdims=True)
            dx = istd * (gxh - m1 - xh * m2)
            accumulate(x, dx.reshape(b, c, h, w), own=True)

    return make_node(out, (x, weight, bias), backward)


class GroupNorm(Module):
    """Group normalization with per-channel affine; batch-size independent."""

    def __init__(self, channels, dtype=np.float32, eps=1e-5):
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.groups = _group_count(channels)
        self.eps = eps
        self.channels = channels

    def forward(self, x):
        return group_norm(x, self.weight, self.bias, self.groups, eps=self.eps)
