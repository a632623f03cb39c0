"""Dense tensors with a dynamic reverse-mode differentiation tape.

Every differentiable operation builds a node that remembers how to push an
upstream gradient back to its inputs.  ``Tensor.backward()`` runs the tape in
reverse topological order.  Training uses float32 data; verification code
builds float64 tensors and runs the same ops (dtype follows the inputs).

Broadcasting follows the trailing-dimension rule: shapes are right-aligned
and a dimension may only be stretched when one side is 1.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractError, DimensionError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    """N-dimensional real array with an optional gradient slot.

    ``data`` is a numpy float array in row-major order.  ``grad`` is filled
    lazily during ``backward()`` and always matches ``data``'s shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- metadata ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._bad_item()

    def _bad_item(self):
        raise ContractError("item() requires a single-element tensor")

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={'yes' if self.requires_grad else 'no'})"

    # -- tape -------------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep seeded with 1; requires a scalar output."""
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar (single-element) tensor")
        topo = []
        seen = set()
        stack = [(self, False)]
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
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_node(data, parents, backward):
    """Assemble an op result; drops tape bookkeeping under no_grad."""
    out = Tensor(data)
    if _grad_enabled:
        grad_parents = tuple(p for p in parents if p.requires_grad)
        if grad_parents:
            out.requires_grad = True
            out._parents = grad_parents
            out._backward = backward
    return out


def accumulate(t, g, own=False):
    """Add an upstream contribution into ``t.grad``.

    ``own=True`` promises ``g`` is freshly allocated and handed over, so the
    first write can keep it without copying.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if own else np.array(g, copy=True)
    else:
        t.grad += g


def broadcast_shape(sa, sb):
    """Trailing-aligned broadcast shape, or DimensionError."""
    out = []
    for da, db in zip(reversed((1,) * max(0, len(sb) - len(sa)) + tuple(sa)),
                      reversed((1,) * max(0, len(sa) - len(sb)) + tuple(sb))):
        if da == db or da == 1 or db == 1:
            out.append(max(da, db))
        else:
            raise DimensionError(f"shapes {tuple(sa)} and {tuple(sb)} do not broadcast")
    return tuple(reversed(out))


def unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- binary elementwise -----------------------------------------------------


def add(a, b):
    a = _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    same = a.shape == b.shape
    if not same:
        broadcast_shape(a.shape, b.shape)
    data = a.data + b.data

    def backward(g):
        accumulate(a, g if same else unbroadcast(g, a.shape))
        accumulate(b, g if same else unbroadcast(g, b.shape))

    return make_node(data, (a, b), backward)


def sub(a, b):
    a = _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    same = a.shape == b.shape
    if not same:
        broadcast_shape(a.shape, b.shape)
    data = a.data - b.data

    def backward(g):
        accumulate(a, g if same else unbroadcast(g, a.shape))
        neg = -g
        accumulate(b, neg if same else unbroadcast(neg, b.shape), own=same)

    return make_node(data, (a, b), backward)


def mul(a, b):
    a = _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    same = a.shape == b.shape
    if not same:
        broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    data = ad * bd

    def backward(g):
        ga = g * bd
        accumulate(a, ga if same else unbroadcast(ga, a.shape), own=same)
        gb = g * ad
        accumulate(b, gb if same else unbroadcast(gb, b.shape), own=same)

    return make_node(data, (a, b), backward)


def div(a, b):
    a = _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    same = a.shape == b.shape
    if not same:
        broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    data = ad / bd

    def backward(g):
        ga = g / bd
        accumulate(a, ga if same else unbroadcast(ga, a.shape), own=same)
        gb = -g * ad / (bd * bd)
        accumulate(b, gb if same else unbroadcast(gb, b.shape), own=same)

    return make_node(data, (a, b), backward)


# -- unary elementwise -------------------------------------------------------


def scale(a, factor):
    factor = float(factor)
    data = a.data * factor

    def backward(g):
        accumulate(a, g * factor)

    return make_node(data, (a,), backward)


def exp(a):
    data = np.exp(a.data)

    def backward(g):
        accumulate(a, g * data)

    return make_node(data, (a,), backward)


def expm1(a):
    data = np.expm1(a.data)

    def backward(g):
        accumulate(a, g * (data + 1.0))

    return make_node(data, (a,), backward)


def log(a):
    ad = a.data
    data = np.log(ad)

    def backward(g):
        accumulate(a, g / ad)

    return make_node(data, (a,), backward)


def sqrt(a):
    data = np.sqrt(a.data)

    def backward(g):
        accumulate(a, g * (0.5 / data))

    return make_node(data, (a,), backward)


def _sigmoid_stable(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a):
    data = _sigmoid_stable(a.data)

    def backward(g):
        accumulate(a, g * data * (1.0 - data))

    return make_node(data, (a,), backward)


def tanh(a):
    data = np.tanh(a.data)

    def backward(g):
        accumulate(a, g * (1.0 - data * data))

    return make_node(data, (a,), backward)


def relu(a):
    ad = a.data
    data = np.maximum(ad, 0.0)

    def backward(g):
        accumulate(a, g * (ad > 0))

    return make_node(data, (a,), backward)


def softplus(a):
    ad = a.data
    data = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))

    def backward(g):
        accumulate(a, g * _sigmoid_stable(ad))

    return make_node(data, (a,), backward)


def clamp(a, lo, hi):
    """Clip values to [lo, hi]; gradient passes only where not clipped."""
    ad = a.data
    data = np.clip(ad, lo, hi)
    inside = (ad >= lo) & (ad <= hi)

    def backward(g):
        accumulate(a, g * inside)

    return make_node(data, (a,), backward)


def where(cond, a, b):
    """Select per element by a boolean ndarray; cond is not differentiable."""
    a = _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    cond = np.asarray(cond, dtype=bool)
    data = np.where(cond, a.data, b.data)

    def backward(g):
        accumulate(a, unbroadcast(np.where(cond, g, 0.0), a.shape))
        accumulate(b, unbroadcast(np.where(cond, 0.0, g), b.shape))

    return make_node(data, (a, b), backward)


_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}
_ELEMENTWISE_UNARY = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "relu": relu,
    "log": log,
    "sqrt": sqrt,
    "softplus": softplus,
}


def elementwise(op_kind, a, b=None):
    """Dispatch an elementwise op by name.

    Binary kinds broadcast by the trailing-dimension rule; ``scale`` takes a
    plain number as ``b``.
    """
    if op_kind in _ELEMENTWISE_BINARY:
        if b is None:
            raise ContractError(f"elementwise('{op_kind}') needs two operands")
        return _ELEMENTWISE_BINARY[op_kind](a, b)
    if op_kind == "scale":
        if b is None:
            raise ContractError("elementwise('scale') needs a scalar factor")
        return scale(a, b)
    if op_kind in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ContractError(f"elementwise('{op_kind}') is unary")
        return _ELEMENTWISE_UNARY[op_kind](a)
    raise ContractError(f"unknown elementwise kind '{op_kind}'")


# -- reductions ---------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        if axis is None:
            accumulate(a, np.broadcast_to(g, shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            accumulate(a, np.broadcast_to(gg, shape))

    return make_node(data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tmax(a, axis, keepdims=False):
    """Max along one axis; gradient flows to the first argmax per slice."""
    ad = a.data
    data = ad.max(axis=axis, keepdims=keepdims)
    arg = ad.argmax(axis=axis)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        out = np.zeros_like(ad)
        np.put_along_axis(out, np.expand_dims(arg, axis), gg, axis=axis)
        accumulate(a, out)

    return make_node(data, (a,), backward)


# -- linear algebra -----------------------------------------------------------


def matmul(a, b):
    """Strict 2-D contraction [M,K] @ [K,N] -> [M,N]."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul expects two rank-2 tensors")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    data = ad @ bd

    def backward(g):
        accumulate(a, g @ bd.T)
        accumulate(b, ad.T @ g)

    return make_node(data, (a, b), backward)


# -- shape ops ----------------------------------------------------------------


def reshape(a, shape):
    old = a.shape
    data = a.data.reshape(shape)

    def backward(g):
        accumulate(a, g.reshape(old))

    return make_node(data, (a,), backward)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)

    def backward(g):
        accumulate(a, np.transpose(g, inv))

    return make_node(data, (a,), backward)


def broadcast_to(a, shape):
    shape = tuple(shape)
    broadcast_shape(a.shape, shape)
    ashape = a.shape
    data = np.broadcast_to(a.data, shape).copy()

    def backward(g):
        accumulate(a, unbroadcast(g, ashape))

    return make_node(data, (a,), backward)


def narrow(a, key):
    """Basic slicing (ints/slices); gradient scatters into the slice."""
    data = a.data[key]
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[key] = g
        accumulate(a, out)

    return make_node(data, (a,), backward)


def concat(tensors, axis):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            accumulate(t, g[tuple(idx)])

    return make_node(data, tuple(tensors), backward)


def flip(a, axis):
    data = np.flip(a.data, axis=axis).copy()

    def backward(g):
        accumulate(a, np.flip(g, axis=axis))

    return make_node(data, (a,), backward)


def cumsum(a, axis):
    data = np.cumsum(a.data, axis=axis)

    def backward(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        accumulate(a, rev)

    return make_node(data, (a,), backward)


def take_positions(a, index, axis):
    """Gather along ``axis`` with a 1-D integer index array.

    For a bijective index (a permutation) the backward scatter is the exact
    inverse permutation, so gather-then-scatter is a bitwise round trip.
    """
    index = np.asarray(index, dtype=np.int64)
    data = np.take(a.data, index, axis=axis)
    n = a.shape[axis]

    def backward(g):
        out = np.zeros(a.shape[:axis] + (n,) + a.shape[axis + 1 :], dtype=g.dtype)
        gm = np.moveaxis(g, axis, 0)
        om = np.moveaxis(out, axis, 0)
        np.add.at(om, index, gm)
        accumulate(a, out)

    return make_node(data, (a,), backward)
