"""Confusion-matrix metrics for binary segmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int
    acc: float
    se: float
    sp: float
    f1: float

    @classmethod
    def from_counts(cls, tp, fp, tn, fn):
        def ratio(num, den):
            return num / den if den > 0 else 0.0

        return cls(
            tp=int(tp), fp=int(fp), tn=int(tn), fn=int(fn),
            acc=ratio(tp + tn, tp + tn + fp + fn),
            se=ratio(tp, tp + fn),
            sp=ratio(tn, tn + fp),
            f1=ratio(2 * tp, 2 * tp + fp + fn),
        )


def confusion(pred_bin, mask, fov=None):
    """(tp, fp, tn, fn) over the field of view (whole image when absent)."""
    pred_bin = np.asarray(pred_bin, dtype=bool)
    truth = np.asarray(mask, dtype=bool)
    if fov is not None:
        keep = np.asarray(fov, dtype=bool)
        pred_bin, truth = pred_bin[keep], truth[keep]
    tp = int(np.count_nonzero(pred_bin & truth))
    fp = int(np.count_nonzero(pred_bin & ~truth))
    fn = int(np.count_nonzero(~pred_bin & truth))
    tn = int(truth.size - tp - fp - fn)
    return tp, fp, tn, fn


def evaluate(model, samples, threshold=0.5):
    """Binarize model probabilities at the threshold and score the samples."""
    tp = fp = tn = fn = 0
    with no_grad():
        for s in samples:
            arts = model(Tensor(s.image[None]))
            pred = arts.prob.data[0, 0] >= threshold
            a, b, c, d = confusion(pred, s.mask[0], None if s.fov is None else s.fov[0])
            tp, fp, tn, fn = tp + a, fp + b, tn + c, fn + d
    return Metrics.from_counts(tp, fp, tn, fn)
