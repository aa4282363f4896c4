"""Finite-difference verification of autodiff gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lmbridge.tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    per_input: list = field(default_factory=list)

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return f"grad_check: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e}) {status}"


def grad_check(fn, point, tol, h=1e-5):
    """Compare autodiff gradients of `fn` against central differences.

    `fn` maps one Tensor (or a sequence of Tensors) to a scalar Tensor and
    must be deterministic.  Relative error per coordinate uses
    |a - n| / max(|a|, |n|, 1e-3); the report carries the max.
    """
    points = [point] if isinstance(point, Tensor) else list(point)
    for p in points:
        p.requires_grad = True
        p.grad = None

    out = fn(*points)
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in points]

    per_input = []
    worst = 0.0
    for pi, p in enumerate(points):
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(fn(*points).data)
            flat[i] = orig - h
            lo = float(fn(*points).data)
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(analytic[pi]), np.abs(numeric)), 1e-3)
        err = float((np.abs(analytic[pi] - numeric) / denom).max()) if flat.size else 0.0
        per_input.append(err)
        worst = max(worst, err)

    return GradCheckReport(max_rel_err=worst, tol=tol, passed=worst < tol, per_input=per_input)
