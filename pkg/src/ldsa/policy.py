"""Representation-conditioned subtask policies.

A second shared encoder produces each agent's history embedding. A decoder
turns every subtask representation into the weights of a linear Q head, all
heads are evaluated for every agent, and the selected subtask's head is kept.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .envs import ContractViolation
from .layers import GRUCell, Linear, _uniform


class TrajectoryEncoderTau:
    """Shared history encoder: affine -> ReLU -> GRU; the GRU state is the output."""

    def __init__(self, rng: np.random.Generator, input_dim: int, hidden: int = 64) -> None:
        self.hidden = hidden
        self.fc_in = Linear(rng, input_dim, hidden, "history.fc_in")
        self.gru = GRUCell(rng, hidden, hidden, "history.gru")

    def init_hidden(self, n: int) -> Tensor:
        return Tensor(np.zeros((n, self.hidden)))

    def unroll(self, inputs: Tensor, h0: Tensor) -> tuple[Tensor, Tensor]:
        return self.gru.unroll(ad.relu(self.fc_in(inputs)), h0)

    def parameters(self) -> list[Tensor]:
        return self.fc_in.parameters() + self.gru.parameters()


def encode_history(encoder: TrajectoryEncoderTau, prev_hidden, agent_input) -> tuple[Tensor, Tensor]:
    x = agent_input if isinstance(agent_input, Tensor) else Tensor(agent_input)
    h = prev_hidden if isinstance(prev_hidden, Tensor) else Tensor(prev_hidden)
    hs, h_next = encoder.unroll(x.reshape(1, *x.shape), h)
    return hs[0], h_next


class SubtaskDecoder:
    """Single affine layer from a representation to a (hidden x n_actions) head plus bias."""

    def __init__(self, rng: np.random.Generator, m: int, hidden: int, n_actions: int) -> None:
        self.hidden, self.n_actions = hidden, n_actions
        self.fc = Linear(rng, m, hidden * n_actions + n_actions, "decoder.fc")

    def decode(self, representations: Tensor) -> tuple[Tensor, Tensor]:
        """Returns head weights (k, hidden, n_actions) and biases (k, n_actions)."""
        k = representations.shape[0]
        out = self.fc(representations)
        split = self.hidden * self.n_actions
        weights = out[:, :split].reshape(k, self.hidden, self.n_actions)
        return weights, out[:, split:]

    def parameters(self) -> list[Tensor]:
        return self.fc.parameters()


class FreeSubtaskHeads:
    """Directly learned per-subtask heads (no decoder); k=1 is the shared-policy head."""

    def __init__(self, rng: np.random.Generator, k: int, hidden: int, n_actions: int) -> None:
        self.weights = _uniform(rng, hidden, (k, hidden, n_actions), "heads.weight")
        self.biases = _uniform(rng, hidden, (k, n_actions), "heads.bias")

    def decode(self, representations=None) -> tuple[Tensor, Tensor]:
        return self.weights, self.biases

    def parameters(self) -> list[Tensor]:
        return [self.weights, self.biases]


def decode_policies(decoder: SubtaskDecoder, representations: Tensor) -> tuple[Tensor, Tensor]:
    return decoder.decode(representations)


def per_subtask_q(h: Tensor, weights: Tensor, biases: Tensor) -> Tensor:
    """Q of every subtask head for every row of h: (N, H) -> (N, k, n_actions)."""
    k, hidden, n_actions = weights.shape
    if h.shape[-1] != hidden or biases.shape != (k, n_actions):
        raise ad.DimensionError(f"h {h.shape}, weights {weights.shape}, biases {biases.shape}")
    lead = h.shape[:-1]
    stacked = weights.transpose(1, 0, 2).reshape(hidden, k * n_actions)
    q = h.reshape(-1, hidden) @ stacked + biases.reshape(k * n_actions)
    return q.reshape(*lead, k, n_actions)


def combine_q(q_sub: Tensor, weights, hard: bool = True) -> Tensor:
    """Weighted sum of subtask Qs over the subtask axis: (..., k, A), (..., k) -> (..., A).

    In hard mode the weights must be exactly one-hot, which makes the result
    bitwise equal to the selected row.
    """
    w = weights if isinstance(weights, Tensor) else Tensor(weights)
    if hard:
        v = w.values
        if not (np.all((v == 0.0) | (v == 1.0)) and np.all(v.sum(axis=-1) == 1.0)):
            raise ContractViolation("combine_q in hard mode needs exactly one-hot weights")
    return (q_sub * w.reshape(*w.shape, 1)).sum(axis=-2)
