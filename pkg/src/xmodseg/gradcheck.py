"""Central finite-difference verification of analytic gradients.

``grad_check`` evaluates a deterministic scalar function twice per parameter
element (at +/- step) and compares against one analytic backward pass on a
fresh tape. Works at float64; relative error uses a small denominator floor so
near-zero gradients compare in absolute terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class Failure:
    param: int
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float = 0.0
    checked: int = 0
    failures: list[Failure] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "OK" if self.passed else f"{len(self.failures)} FAILURES"
        return f"grad_check: {self.checked} elements, max rel err {self.max_rel_err:.3e} [{status}]"


def _rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(f, params, step: float = 1e-5, tol: float = 1e-4,
               denom_floor: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` w.r.t. ``params`` against central differences.

    ``f`` must be a deterministic zero-argument callable returning a scalar
    Tensor and must not open its own tape.
    """
    with Tape():
        loss = f()
        grads = backward(loss)
    analytic = []
    for p in params:
        g = grads.wrt(p)
        analytic.append(np.zeros_like(p.data) if g is None else g)

    report = GradCheckReport(tol=tol)
    for pi, p in enumerate(params):
        base = p.data.copy()
        flat = base.reshape(-1)
        for idx in range(flat.size):
            bumped = flat.copy()
            bumped[idx] += step
            p.assign(bumped.reshape(base.shape))
            hi = f().item()
            bumped[idx] = flat[idx] - step
            p.assign(bumped.reshape(base.shape))
            lo = f().item()
            p.assign(base)
            numeric = (hi - lo) / (2.0 * step)
            a = float(analytic[pi].reshape(-1)[idx])
            rel = _rel_err(a, numeric, denom_floor)
            report.checked += 1
            report.max_rel_err = max(report.max_rel_err, rel)
            if rel >= tol:
                report.failures.append(Failure(pi, idx, a, numeric, rel))
    return report


def random_params(rng: np.random.Generator, shapes, scale: float = 1.0) -> list[Tensor]:
    return [Tensor(rng.standard_normal(s) * scale, requires_grad=True) for s in shapes]
