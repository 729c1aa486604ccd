"""Ability-based subtask selection.

Each agent encodes its action-observation history into an ability vector,
scores every subtask by the dot product with its representation, and samples
a subtask with the straight-through Gumbel-Softmax estimator during training.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, Tensor
from .layers import GRUCell, Linear

KL_FLOOR = 1e-10


class TrajectoryEncoderH:
    """Shared ability encoder: affine -> ReLU -> GRU -> affine."""

    def __init__(self, rng: np.random.Generator, input_dim: int, hidden: int = 64, m: int = 64) -> None:
        self.hidden = hidden
        self.fc_in = Linear(rng, input_dim, hidden, "ability.fc_in")
        self.gru = GRUCell(rng, hidden, hidden, "ability.gru")
        self.fc_out = Linear(rng, hidden, m, "ability.fc_out")

    def init_hidden(self, n: int) -> Tensor:
        return Tensor(np.zeros((n, self.hidden)))

    def unroll(self, inputs: Tensor, h0: Tensor) -> tuple[Tensor, Tensor]:
        """inputs (T, N, I) -> ability vectors (T, N, m) and the final hidden state."""
        pre = ad.relu(self.fc_in(inputs))
        hs, h_last = self.gru.unroll(pre, h0)
        return self.fc_out(hs), h_last

    def parameters(self) -> list[Tensor]:
        return self.fc_in.parameters() + self.gru.parameters() + self.fc_out.parameters()


def encode_ability(encoder: TrajectoryEncoderH, prev_hidden, agent_input) -> tuple[Tensor, Tensor]:
    """Single step for a batch of agents: (N, I) inputs -> ((N, m), next hidden)."""
    x = agent_input if isinstance(agent_input, Tensor) else Tensor(agent_input)
    h = prev_hidden if isinstance(prev_hidden, Tensor) else Tensor(prev_hidden)
    x_tau, h_next = encoder.unroll(x.reshape(1, *x.shape), h)
    return x_tau[0], h_next


@dataclass
class SelectionDistribution:
    logits: np.ndarray
    probs: np.ndarray
    one_hot: np.ndarray
    index: np.ndarray


def selection_logits(x_tau: Tensor, representations: Tensor) -> Tensor:
    if x_tau.shape[-1] != representations.shape[-1]:
        raise ad.DimensionError(
            f"ability vectors {x_tau.shape} and representations {representations.shape} disagree on m"
        )
    return x_tau @ representations.transpose()


def selection_distribution(x_tau: Tensor, representations: Tensor) -> tuple[Tensor, Tensor]:
    """(logits, probs) with probs = softmax of ability/representation dot products."""
    logits = selection_logits(x_tau, representations)
    return logits, ad.softmax(logits, axis=-1)


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    # uniform() is in [0, 1); keep u > 0 so both logs stay finite
    u = rng.uniform(size=shape)
    u = np.maximum(u, np.finfo(np.float64).tiny)
    return -np.log(-np.log(u))


def one_hot(index: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros(np.shape(index) + (k,))
    np.put_along_axis(out, np.asarray(index)[..., None], 1.0, axis=-1)
    return out


def gumbel_st_sample(
    probs: Tensor,
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
    hard: bool = True,
) -> tuple[Tensor, np.ndarray]:
    """Straight-through Gumbel-Softmax draw from ``probs`` over the last axis.

    Returns (one_hot, index). The forward value is the hard one-hot at the
    argmax of log(probs) + noise; gradients are those of the relaxed sample
    softmax((log probs + noise) / temperature). With ``hard=False`` the relaxed
    sample itself is returned, which is smooth in ``probs``.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    if not np.all(np.isfinite(probs.values)):
        raise DomainError("selection probabilities must be finite")
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise must be given")
        noise = sample_gumbel(rng, probs.shape)
    log_p = ad.log(ad.clamp_min(probs, KL_FLOOR))
    relaxed = ad.softmax((log_p + noise) / temperature, axis=-1)
    index = np.argmax(log_p.values + noise, axis=-1)
    if not hard:
        return relaxed, index
    return ad.straight_through(one_hot(index, probs.shape[-1]), relaxed), index


def temporal_kl_regularizer(probs: Tensor, mask: np.ndarray, stop_gradient_next: bool = False) -> Tensor:
    """Mean over valid (timestep, episode) pairs of the agent-summed KL(p_t || p_{t+1}).

    probs: (T, B, n_agents, k). mask: (T - 1, B), 1 where both t and t + 1 are
    real (non-padded, pre-terminal) steps.
    """
    if probs.shape[0] < 2:
        raise ValueError("temporal KL needs at least two timesteps")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (probs.shape[0] - 1, probs.shape[1]):
        raise ad.DimensionError(f"mask {mask.shape} does not match probs {probs.shape}")
    cur = probs[:-1]
    nxt = probs[1:]
    if stop_gradient_next:
        nxt = ad.detach(nxt)
    log_cur = ad.log(ad.clamp_min(cur, KL_FLOOR))
    log_nxt = ad.log(ad.clamp_min(nxt, KL_FLOOR))
    kl = (cur * (log_cur - log_nxt)).sum(axis=-1).sum(axis=-1)  # (T-1, B)
    count = mask.sum()
    if count == 0:
        return Tensor(0.0)
    return (kl * mask).sum() / count


def switch_counts(indices: np.ndarray, lengths) -> np.ndarray:
    """Per-episode number of subtask changes; indices (T, B, n_agents)."""
    indices = np.asarray(indices)
    out = np.zeros(indices.shape[1])
    for b, length in enumerate(lengths):
        seq = indices[:length, b]
        out[b] = np.sum(seq[1:] != seq[:-1])
    return out
