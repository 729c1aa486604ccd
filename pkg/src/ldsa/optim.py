"""RMSprop, gradient clipping and the linear exploration schedule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


class NonFiniteGradient(FloatingPointError):
    def __init__(self, block: str) -> None:
        super().__init__(f"non-finite gradient in parameter block {block!r}")
        self.block = block


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 1.0
    finish: float = 0.05
    anneal_time: int = 50_000

    def __call__(self, t: int) -> float:
        if t < 0:
            raise ValueError("timestep must be non-negative")
        if t >= self.anneal_time:
            return self.finish
        frac = t / self.anneal_time
        return self.start - (self.start - self.finish) * frac


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class RMSprop:
    """v <- alpha*v + (1-alpha)*g^2 ; p <- p - lr*g/(sqrt(v)+eps)."""

    def __init__(self, params: list[Tensor], lr: float = 5e-4, alpha: float = 0.99, eps: float = 1e-5) -> None:
        self.params = list(params)
        self.lr, self.alpha, self.eps = lr, alpha, eps
        self.square_avg = [np.zeros_like(p.values) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def check_finite(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(p.name or f"param[{i}]")

    def step(self) -> None:
        self.check_finite()
        for p, v in zip(self.params, self.square_avg):
            if p.grad is None:
                continue
            g = p.grad
            v *= self.alpha
            v += (1.0 - self.alpha) * g * g
            p.values -= self.lr * g / (np.sqrt(v) + self.eps)
