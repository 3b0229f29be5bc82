"""Central finite-difference gradient checker.

Run it on float64 tensors; in float32 the finite differences are dominated
by rounding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    passed: bool
    worst_rel_err: float
    worst_param: str
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    n_checked: int
    tol: float

    def line(self, label: str) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {label}: worst_rel_err={self.worst_rel_err:.3e} at {self.worst_param}{list(self.worst_index)} "
            f"(analytic={self.analytic:.6e}, numeric={self.numeric:.6e}, n={self.n_checked}, tol={self.tol:g})"
        )


def rel_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(
    build_loss: Callable[[], Tensor],
    params: Sequence[Tensor],
    tol: float = 1e-3,
    h: float = 1e-3,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients with central differences for every coordinate.

    ``build_loss`` must rebuild the graph from scratch and be deterministic.
    Relative error uses ``max(|analytic|, |numeric|, floor)`` as the scale so
    coordinates whose true gradient is ~0 are judged absolutely.
    """
    for p in params:
        p.grad = None
        p.requires_grad = True
    loss = build_loss()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    worst = (-1.0, "", (), 0.0, 0.0)
    count = 0
    with no_grad():
        for k, p in enumerate(params):
            flat = p.data.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h
                fp = float(build_loss().data)
                flat[idx] = orig - h
                fm = float(build_loss().data)
                flat[idx] = orig
                num = (fp - fm) / (2 * h)
                ana = float(analytic[k].reshape(-1)[idx])
                err = rel_error(ana, num, floor)
                count += 1
                if err > worst[0]:
                    name = p.name or f"param{k}"
                    worst = (err, name, np.unravel_index(idx, p.shape), ana, num)
    err, name, index, ana, num = worst
    return GradCheckReport(
        passed=bool(err <= tol),
        worst_rel_err=float(err),
        worst_param=name,
        worst_index=tuple(int(i) for i in index),
        analytic=ana,
        numeric=num,
        n_checked=count,
        tol=tol,
    )
