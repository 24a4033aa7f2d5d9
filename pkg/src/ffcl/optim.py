"""Adam and cosine-annealing learning-rate schedule."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import TrainingError
from .tensor import Tensor


class Adam:
    """Adam with bias correction. ``step`` zeroes the gradients it consumed.

    Parameters whose ``grad`` is None are skipped entirely (moments untouched),
    so a parameter the loss never reached cannot move.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None, context: str = "") -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise TrainingError(f"non-finite gradient{' (' + context + ')' if context else ''}")
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            dt = p.data.dtype.type
            m *= dt(self.beta1)
            m += dt(1 - self.beta1) * g
            v *= dt(self.beta2)
            v += dt(1 - self.beta2) * g * g
            m_hat = m / dt(c1)
            v_hat = v / dt(c2)
            p.data -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(self.eps))
        self.zero_grad()


class CosineAnnealing:
    """lr(t) = lr_min + (lr0 - lr_min) * (1 + cos(pi t / T)) / 2, clamped to lr_min past T."""

    def __init__(self, lr0: float, total_steps: int, lr_min: float = 0.0):
        if total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {total_steps}")
        self.lr0 = lr0
        self.lr_min = lr_min
        self.total_steps = total_steps
        self.t = 0

    def lr_at(self, t: int) -> float:
        if t <= 0:
            return self.lr0
        if t >= self.total_steps:
            return self.lr_min
        return self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (1 + math.cos(math.pi * t / self.total_steps))

    def lr(self) -> float:
        return self.lr_at(self.t)

    def advance(self) -> None:
        self.t += 1


class ConstantLR:
    def __init__(self, lr0: float):
        self.lr0 = lr0
        self.t = 0

    def lr(self) -> float:
        return self.lr0

    def advance(self) -> None:
        self.t += 1


def make_schedule(lr0: float, total_steps: int, anneal: bool):
    if anneal and total_steps >= 1:
        return CosineAnnealing(lr0, total_steps)
    return ConstantLR(lr0)
