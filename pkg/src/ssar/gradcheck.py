"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: list[float]
    failures: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.passed


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-4,
    tol: float = 1e-3,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``f()`` with central differences.

    ``f`` must rebuild its graph from the current contents of ``params`` on
    every call. Per element the relative error is
    ``|a - n| / max(|a|, |n|)``; elements where both values are below
    ``abs_floor`` pass when their absolute error is below ``abs_floor``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    report = GradCheckReport(passed=True, max_rel_error=[])
    for pi, (p, ana) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = f().item()
            flat[i] = orig - eps
            minus = f().item()
            flat[i] = orig
            num = (plus - minus) / (2 * eps)
            a = float(ana_flat[i])
            if not (np.isfinite(num) and np.isfinite(a)):
                report.passed = False
                report.failures.append(f"param {pi} element {i}: non-finite (analytic={a}, numeric={num})")
                worst = float("inf")
                continue
            err = abs(a - num)
            if abs(a) < abs_floor and abs(num) < abs_floor:
                rel = 0.0 if err < abs_floor else err
            else:
                rel = err / max(abs(a), abs(num))
            if rel >= tol:
                report.passed = False
                report.failures.append(f"param {pi} element {i}: analytic={a:.6g} numeric={num:.6g} rel={rel:.3g}")
            worst = max(worst, rel)
        report.max_rel_error.append(worst)
    for p in params:
        p.grad = None
    return report
