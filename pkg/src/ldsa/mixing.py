"""Monotonic state-conditioned mixing of individual Q-values."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Linear


class Mixer:
    """Two-layer mixer whose weights come from hypernetworks on the global state.

    Layer weights pass through abs, so Q_tot is non-decreasing in every
    agent's Q. The final bias is a two-layer state-value network.
    """

    def __init__(self, rng: np.random.Generator, n_agents: int, state_dim: int, embed_dim: int = 32) -> None:
        self.n_agents, self.state_dim, self.embed_dim = n_agents, state_dim, embed_dim
        self.hyper_w1 = Linear(rng, state_dim, n_agents * embed_dim, "mixer.hyper_w1")
        self.hyper_b1 = Linear(rng, state_dim, embed_dim, "mixer.hyper_b1")
        self.hyper_w2 = Linear(rng, state_dim, embed_dim, "mixer.hyper_w2")
        self.value_fc1 = Linear(rng, state_dim, embed_dim, "mixer.value_fc1")
        self.value_fc2 = Linear(rng, embed_dim, 1, "mixer.value_fc2")

    def __call__(self, q_values: Tensor, states: Tensor) -> Tensor:
        return self.mix(q_values, states)

    def mix(self, q_values, states) -> Tensor:
        """q_values (N, n_agents), states (N, state_dim) -> Q_tot (N,)."""
        q = q_values if isinstance(q_values, Tensor) else Tensor(q_values)
        s = states if isinstance(states, Tensor) else Tensor(states)
        n = q.shape[0]
        w1 = ad.abs(self.hyper_w1(s)).reshape(n, self.n_agents, self.embed_dim)
        b1 = self.hyper_b1(s).reshape(n, 1, self.embed_dim)
        hidden = ad.elu(q.reshape(n, 1, self.n_agents) @ w1 + b1)
        w2 = ad.abs(self.hyper_w2(s)).reshape(n, self.embed_dim, 1)
        v = self.value_fc2(ad.relu(self.value_fc1(s))).reshape(n, 1, 1)
        return (hidden @ w2 + v).reshape(n)

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in (self.hyper_w1, self.hyper_b1, self.hyper_w2, self.value_fc1, self.value_fc2):
            out += layer.parameters()
        return out


def mix(mixer: Mixer, q_values, state) -> Tensor:
    return mixer.mix(q_values, state)


def td_error_terms(chosen_q_tot: Tensor, rewards, terminated, target_q_tot, gamma: float) -> Tensor:
    """Per-transition squared TD error with bootstrapping masked at termination."""
    rewards = np.asarray(rewards, dtype=np.float64)
    terminated = np.asarray(terminated, dtype=np.float64)
    targets = rewards + gamma * (1.0 - terminated) * np.asarray(target_q_tot, dtype=np.float64)
    err = chosen_q_tot - targets
    return err * err


def masked_mean(values: Tensor, mask) -> Tensor:
    mask = np.asarray(mask, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        raise ValueError("masked mean over an empty selection")
    return (values * mask).sum() / count
