"""Episodic FIFO replay and time-major episode batches."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


class BufferNotReady(RuntimeError):
    """Fewer episodes stored than the requested batch size."""


@dataclass
class Episode:
    """One episode; T acted steps and T + 1 observations (the last is post-step)."""

    obs: np.ndarray  # (T+1, n, obs_dim)
    state: np.ndarray  # (T+1, state_dim)
    avail: np.ndarray  # (T+1, n, A) bool
    actions: np.ndarray  # (T, n) int
    reward: np.ndarray  # (T,)
    terminated: np.ndarray  # (T,) bool

    def __post_init__(self) -> None:
        t = len(self.actions)
        if t < 1:
            raise ValueError("an episode needs at least one step")
        for name in ("obs", "state", "avail"):
            if len(getattr(self, name)) != t + 1:
                raise ValueError(f"{name} must have {t + 1} entries, got {len(getattr(self, name))}")
        for name in ("reward", "terminated"):
            if len(getattr(self, name)) != t:
                raise ValueError(f"{name} must have {t} entries")
        chosen = np.take_along_axis(self.avail[:-1], self.actions[..., None], axis=-1)
        if not chosen.all():
            raise ValueError("episode contains unavailable actions")

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class EpisodeBatch:
    """Time-major, padded batch. Shapes use T = longest episode, B = batch size."""

    obs: np.ndarray  # (T+1, B, n, obs_dim)
    state: np.ndarray  # (T+1, B, state_dim)
    avail: np.ndarray  # (T+1, B, n, A)
    actions: np.ndarray  # (T, B, n)
    reward: np.ndarray  # (T, B)
    terminated: np.ndarray  # (T, B)
    filled: np.ndarray  # (T, B)

    @property
    def max_t(self) -> int:
        return self.actions.shape[0]

    @property
    def batch_size(self) -> int:
        return self.actions.shape[1]

    @property
    def lengths(self) -> np.ndarray:
        return self.filled.sum(axis=0).astype(int)

    @classmethod
    def from_episodes(cls, episodes) -> EpisodeBatch:
        episodes = list(episodes)
        if not episodes:
            raise ValueError("cannot batch zero episodes")
        T = max(len(e) for e in episodes)
        B = len(episodes)
        first = episodes[0]
        n, obs_dim = first.obs.shape[1:]
        n_actions = first.avail.shape[-1]
        obs = np.zeros((T + 1, B, n, obs_dim))
        state = np.zeros((T + 1, B, first.state.shape[-1]))
        avail = np.zeros((T + 1, B, n, n_actions), dtype=bool)
        avail[..., -1] = True
        actions = np.full((T, B, n), n_actions - 1, dtype=np.int64)
        reward = np.zeros((T, B))
        terminated = np.zeros((T, B))
        filled = np.zeros((T, B))
        for b, e in enumerate(episodes):
            t = len(e)
            obs[: t + 1, b] = e.obs
            state[: t + 1, b] = e.state
            avail[: t + 1, b] = e.avail
            actions[:t, b] = e.actions
            reward[:t, b] = e.reward
            terminated[:t, b] = e.terminated
            filled[:t, b] = 1.0
        return cls(obs, state, avail, actions, reward, terminated, filled)


class ReplayBuffer:
    """First-in-first-out store of whole episodes with uniform batch sampling."""

    def __init__(self, capacity: int = 5000, rng: np.random.Generator | None = None) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._episodes: deque[Episode] = deque(maxlen=capacity)
        self._rng = rng if rng is not None else np.random.default_rng()

    def __len__(self) -> int:
        return len(self._episodes)

    def push(self, episode: Episode) -> None:
        self._episodes.append(episode)

    def can_sample(self, batch_size: int) -> bool:
        return len(self._episodes) >= batch_size

    def sample(self, batch_size: int) -> EpisodeBatch:
        if not self.can_sample(batch_size):
            raise BufferNotReady(f"buffer holds {len(self)} episodes, batch needs {batch_size}")
        idx = self._rng.choice(len(self._episodes), size=batch_size, replace=False)
        return EpisodeBatch.from_episodes(self._episodes[i] for i in idx)

    def episodes(self) -> list[Episode]:
        return list(self._episodes)
