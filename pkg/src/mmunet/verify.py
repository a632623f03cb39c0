"""Gradient verification suite covering every differentiable operation.

Each entry builds float64 inputs, runs the op as a scalar-sum closure and
compares tape gradients against central finite differences.  Inputs are
seeded; values near activation kinks (relu, max pooling) are avoided where
the construction allows so the finite-difference secant stays valid.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .conv import bilinear_resize, conv2d, maxpool2d
from .gradcheck import GradCheckReport, gradcheck
from .guidance import CbamBlock, RssgBlock, RssgInputs
from .morph import (Axis, CoordinateSet, KernelGeometry, OffsetField, axis_aggregate,
                    base_grid, bilinear_sample, morph_coordinates, predict_offsets)
from .network import MMUNet, NetworkConfig
from .sstate import MmcLayer, ScanDirection, SsmParams, make_scan_order, morph_ssm_fuse, selective_scan
from .tensor import Tensor
from .training import loss

F64 = np.float64


def _t(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape).astype(F64), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.15):
    vals = rng.uniform(margin, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(vals.astype(F64), requires_grad=True)


def _randomize_mmc(layer, rng):
    """Wake up the offset and scan branches so their gradients are exercised."""
    for p, scale in ((layer.off_w_x, 0.4), (layer.off_w_y, 0.4),
                     (layer.off_b_x, 0.2), (layer.off_b_y, 0.2)):
        p.data = rng.normal(0.0, scale, size=p.data.shape)
    layer.alpha_x.data = np.asarray(0.5, dtype=F64)
    layer.alpha_y.data = np.asarray(-0.4, dtype=F64)


def _check(reports, name, closure, inputs, rng, tolerance=1e-4, step=1e-3, max_entries=48):
    reports.append(gradcheck(closure, inputs, tolerance=tolerance, step=step,
                             op_name=name, max_entries=max_entries, rng=rng))


def run_gradient_suite(seed=0, tolerance=1e-4, step=1e-3, include_network=True):
    """Run every per-op gradient check; returns the list of reports."""
    rng = np.random.default_rng(seed)
    reports = []

    # elementwise kinds, three shapes each (one broadcasting case for binaries)
    for kind in ("add", "mul", "sigmoid", "tanh", "exp", "relu", "scale"):
        for shapes in (((3, 4), (3, 4)), ((2, 3, 4), (3, 4)), ((5,), (1,))):
            if kind == "relu":
                a = _away_from_zero(rng, shapes[0])
            else:
                a = _t(rng, shapes[0])
            if kind in ("add", "mul"):
                b = _t(rng, shapes[1])
                inputs = [a, b]
                closure = (lambda a=a, b=b, k=kind: T.tsum(T.elementwise(k, a, b)))
            elif kind == "scale":
                inputs = [a]
                closure = (lambda a=a: T.tsum(T.elementwise("scale", a, 1.7)))
            else:
                inputs = [a]
                closure = (lambda a=a, k=kind: T.tsum(T.elementwise(k, a)))
            _check(reports, f"elementwise/{kind}", closure, inputs, rng,
                   tolerance=tolerance, step=step)

    for m, k, n in ((2, 3, 4), (1, 5, 1), (4, 4, 2)):
        a, b = _t(rng, (m, k)), _t(rng, (k, n))
        _check(reports, "matmul", lambda a=a, b=b: T.tsum(T.matmul(a, b)), [a, b], rng,
               tolerance=tolerance, step=step)

    for xs, ws, stride, pad in (((1, 2, 5, 5), (3, 2, 3, 3), 1, 1),
                                ((2, 3, 6, 6), (2, 3, 3, 3), 2, 1),
                                ((1, 2, 6, 8), (2, 2, 3, 5), 1, 2)):
        x, w = _t(rng, xs), _t(rng, ws)
        _check(reports, "conv2d",
               lambda x=x, w=w, s=stride, p=pad: T.tsum(conv2d(x, w, stride=s, padding=p)),
               [x, w], rng, tolerance=tolerance, step=step)

    for fs, k in (((1, 2, 5, 5), 3), ((2, 1, 4, 6), 3), ((1, 3, 6, 4), 5)):
        b, _, h, w = fs
        feat = _t(rng, fs)
        rows = Tensor(rng.uniform(0.2, h - 1.2, size=(b, k, h, w)), requires_grad=True)
        cols = Tensor(rng.uniform(0.2, w - 1.2, size=(b, k, h, w)), requires_grad=True)
        coords = CoordinateSet(rows=rows, cols=cols, axis=None)
        _check(reports, "bilinear_sample",
               lambda f=feat, c=coords: T.tsum(bilinear_sample(f, c)),
               [feat, rows, cols], rng, tolerance=tolerance, step=step)

    for fs, klen, cout in (((1, 2, 5, 5), 3, 2), ((2, 2, 4, 4), 3, 3), ((1, 3, 7, 6), 5, 2)):
        b, c, h, w = fs
        feat = _t(rng, fs)
        deltas = Tensor(rng.uniform(-0.9, 0.9, size=(b, klen - 1, h, w)), requires_grad=True)
        weights = _t(rng, (cout, c, klen))
        geom = KernelGeometry(klen, Axis.X_EXTEND if klen == 3 else Axis.Y_EXTEND)
        grid = base_grid(h, w)

        def closure(f=feat, d=deltas, wt=weights, g=geom, gr=grid):
            coords = morph_coordinates(gr, OffsetField(values=d, axis=g.axis), g)
            return T.tsum(axis_aggregate(bilinear_sample(f, coords), wt))

        _check(reports, "morph_pipeline", closure, [feat, deltas, weights], rng,
               tolerance=tolerance, step=step, max_entries=24)

    for cs in ((1, 3, 4, 4), (2, 2, 5, 5), (1, 4, 3, 6)):
        feat = _t(rng, cs)
        pw = _t(rng, (2, cs[1]))
        pb = _t(rng, (2,))
        _check(reports, "predict_offsets",
               lambda f=feat, w=pw, b=pb: T.tsum(predict_offsets(f, w, b).values),
               [feat, pw, pb], rng, tolerance=tolerance, step=step)

    for bs, ls, ds, ns in ((1, 5, 2, 3), (2, 7, 3, 2), (1, 1, 2, 4)):
        x = _t(rng, (bs, ls, ds))
        params = SsmParams(ds, ns, rng, dtype=F64)
        inputs = [x] + [p for _, p in params.named_parameters()]
        _check(reports, "selective_scan",
               lambda x=x, p=params: T.tsum(selective_scan(x, p)),
               inputs, rng, tolerance=tolerance, step=step, max_entries=20)

    for shape, axis in (((1, 2, 3, 4), Axis.X_EXTEND), ((2, 3, 3, 3), Axis.Y_EXTEND),
                        ((1, 2, 4, 2), Axis.X_EXTEND)):
        f = _t(rng, shape)
        params = SsmParams(shape[1], 3, rng, dtype=F64)
        alpha = Tensor(np.asarray(0.7, dtype=F64), requires_grad=True)
        order = make_scan_order(axis, ScanDirection.FORWARD, shape[2], shape[3])
        inputs = [f, alpha] + [p for _, p in params.named_parameters()]
        _check(reports, "morph_ssm_fuse",
               lambda f=f, o=order, p=params, a=alpha: T.tsum(morph_ssm_fuse(f, o, p, a)),
               inputs, rng, tolerance=tolerance, step=step, max_entries=20)

    for xs, cout in (((1, 2, 6, 6), 3), ((2, 3, 4, 4), 2), ((1, 2, 4, 6), 2)):
        x = _t(rng, xs)
        layer = MmcLayer(xs[1], cout, rng, state_dim=3, dtype=F64).to_dtype(F64)
        _randomize_mmc(layer, rng)
        inputs = [x] + [p for _, p in layer.named_parameters()]
        _check(reports, "mmc_forward", lambda x=x, m=layer: T.tsum(m(x)),
               inputs, rng, tolerance=tolerance, step=step, max_entries=12)

    for xs in ((1, 4, 6, 6), (2, 4, 5, 5), (1, 8, 6, 4)):
        x = _t(rng, xs)
        block = CbamBlock(xs[1], rng, dtype=F64)
        inputs = [x] + [p for _, p in block.named_parameters()]
        _check(reports, "cbam", lambda x=x, m=block: T.tsum(m(x)),
               inputs, rng, tolerance=tolerance, step=step, max_entries=16)

    for hw in ((6, 6), (4, 4), (8, 6)):
        h, w = hw
        f_edge = _t(rng, (1, 4, h, w))
        f_deep = _t(rng, (1, 4, h, w))
        r_prev = _t(rng, (1, 1, h, w))
        block = RssgBlock(4, rng, state_dim=3, dtype=F64).to_dtype(F64)
        _randomize_mmc(block.mix, rng)
        inputs = [f_edge, f_deep, r_prev] + [p for _, p in block.named_parameters()]
        _check(reports, "rssg_forward",
               lambda e=f_edge, d=f_deep, r=r_prev, m=block:
                   T.tsum(m(RssgInputs(f_edge=e, f_deep=d, r_prev=r))),
               inputs, rng, tolerance=tolerance, step=step, max_entries=10)

    for shape, kind, with_fov in (((1, 1, 6, 6), "bce_dice", False),
                                  ((2, 1, 4, 4), "bce_dice", True),
                                  ((1, 1, 5, 5), "bce", False)):
        pred = Tensor(rng.uniform(0.05, 0.95, size=shape), requires_grad=True)
        mask = (rng.random(shape) < 0.4).astype(F64)
        fov = (rng.random(shape) < 0.8).astype(F64) if with_fov else None
        if fov is not None and fov.sum() == 0:
            fov[..., 0, 0] = 1.0
        _check(reports, "loss",
               lambda p=pred, m=mask, f=fov, k=kind: loss(p, Tensor(m), fov=f, kind=k),
               [pred], rng, tolerance=tolerance, step=step)

    for xs, k in (((1, 2, 4, 4), maxpool2d), ((1, 3, 6, 6), maxpool2d)):
        x = _away_from_zero(rng, xs)
        x.data += rng.uniform(0, 0.05, size=xs)  # break pooling ties
        _check(reports, "maxpool2d", lambda x=x: T.tsum(maxpool2d(x)), [x], rng,
               tolerance=tolerance, step=step)
    for xs, out_hw in (((1, 2, 4, 4), (8, 8)), ((1, 1, 6, 6), (3, 5))):
        x = _t(rng, xs)
        _check(reports, "bilinear_resize",
               lambda x=x, o=out_hw: T.tsum(bilinear_resize(x, o[0], o[1])), [x], rng,
               tolerance=tolerance, step=step)

    if include_network:
        reports.append(run_network_gradcheck(seed=seed))
    return reports


def run_network_gradcheck(seed=0, tolerance=1e-3, step=1e-3, n_param_tensors=8):
    """End-to-end check on a micro configuration (sum of probabilities as loss).

    Probes the input image plus a seeded selection of parameter tensors; the
    7-stage depth amplifies float noise, hence the looser tolerance.
    """
    rng = np.random.default_rng(seed)
    config = NetworkConfig(width_mult=1 / 16, input_hw=(32, 32), seed=seed)
    model = MMUNet(config).to_dtype(F64)
    x = Tensor(rng.uniform(0.1, 0.9, size=(1, 3, 32, 32)), requires_grad=True)

    named = list(model.named_parameters())
    pick = rng.choice(len(named), size=min(n_param_tensors, len(named)), replace=False)
    inputs = [x] + [named[i][1] for i in sorted(pick)]
    return gradcheck(lambda: T.tsum(model(x).prob), inputs, tolerance=tolerance,
                     step=step, op_name="network_end_to_end", max_entries=6, rng=rng)
