"""Finite-difference verification of registered gradients.

Every differentiable op in the library is expected to pass this check on
float64 inputs: the analytic gradient from the tape is compared elementwise
against central differences (f(x+h) - f(x-h)) / 2h.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    op_name: str
    max_relative_error: float
    perturbation_step: float
    passed: bool

    def __str__(self):
        state = "ok" if self.passed else "FAIL"
        return f"{self.op_name}: max_rel_err={self.max_relative_error:.3e} (h={self.perturbation_step:g}) {state}"


def gradcheck(op_closure, inputs, tolerance=1e-4, step=1e-3, op_name="op",
              max_entries=None, rng=None):
    """Compare tape gradients of a scalar closure against central differences.

    ``inputs`` are the float64 leaf tensors the closure reads; each gets
    ``requires_grad`` forced on.  When a tensor holds more than
    ``max_entries`` scalars, a seeded random subset of entries is probed
    (full sweep otherwise).  Relative error uses the denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError("gradcheck inputs must be float64 tensors")
        t.requires_grad = True
        t.grad = None

    out = op_closure()
    if out.size != 1:
        raise ContractError("gradcheck closure must return a scalar tensor")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    if rng is None:
        rng = np.random.default_rng(0)
    max_err = 0.0
    for t, an in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            idxs = rng.choice(n, size=max_entries, replace=False)
        else:
            idxs = range(n)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                f_plus = float(op_closure().data.reshape(-1)[0])
            flat[i] = orig - step
            with no_grad():
                f_minus = float(op_closure().data.reshape(-1)[0])
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = an.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            err = abs(a - numeric) / denom
            if err > max_err:
                max_err = err

    return GradCheckReport(
        op_name=op_name,
        max_relative_error=max_err,
        perturbation_step=step,
        passed=max_err < tolerance,
    )
