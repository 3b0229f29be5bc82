"""Adam with bias correction."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


class Adam:
    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 0.002,
        beta1: float = 0.5,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        """Apply one update to every parameter, then clear their grads."""
        missing = [p.name or f"#{i}" for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise ValueError(f"adam_step: no gradient for parameter(s) {', '.join(missing[:5])}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mhat = m / p.dtype.type(c1)
            vhat = v / p.dtype.type(c2)
            p.data -= p.dtype.type(self.lr) * mhat / (np.sqrt(vhat) + p.dtype.type(self.eps))
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
