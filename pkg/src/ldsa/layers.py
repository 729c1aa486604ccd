"""Parameterised building blocks shared by the LDSA networks."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def _uniform(rng: np.random.Generator, fan_in: int, shape, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Linear:
    """Affine map ``x @ weight + bias`` over the last axis."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, name: str) -> None:
        self.weight = _uniform(rng, n_in, (n_in, n_out), f"{name}.weight")
        self.bias = _uniform(rng, n_in, (n_out,), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            return x @ self.weight + self.bias
        lead = x.shape[:-1]
        flat = x.reshape(-1, x.shape[-1]) @ self.weight + self.bias
        return flat.reshape(*lead, self.weight.shape[1])

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class GRUCell:
    def __init__(self, rng: np.random.Generator, n_in: int, hidden: int, name: str) -> None:
        self.hidden = hidden
        self.w_ih = _uniform(rng, hidden, (n_in, 3 * hidden), f"{name}.w_ih")
        self.w_hh = _uniform(rng, hidden, (hidden, 3 * hidden), f"{name}.w_hh")
        self.b_ih = _uniform(rng, hidden, (3 * hidden,), f"{name}.b_ih")
        self.b_hh = _uniform(rng, hidden, (3 * hidden,), f"{name}.b_hh")

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return ad.gru_cell(x, h, self.w_ih, self.w_hh, self.b_ih, self.b_hh)

    def unroll(self, xs: Tensor, h0: Tensor) -> tuple[Tensor, Tensor]:
        """Run over the leading time axis of ``xs`` (T, N, I); returns ((T, N, H), last h)."""
        hs = ad.gru_sequence(xs, h0, self.w_ih, self.w_hh, self.b_ih, self.b_hh)
        return hs, hs[-1]

    def parameters(self) -> list[Tensor]:
        return [self.w_ih, self.w_hh, self.b_ih, self.b_hh]
