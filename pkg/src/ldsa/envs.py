"""Toy cooperative Dec-POMDP environments with brute-force optimal returns.

Both environments expose the same small contract: ``reset(seed)`` and
``step(actions)`` return a :class:`StepResult`, and ``oracle_return`` solves
the underlying fully observed MDP by exhaustive search.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Callable, Hashable

import numpy as np


class ContractViolation(RuntimeError):
    """A caller broke an environment or network usage rule."""


class SearchBudgetExceeded(RuntimeError):
    """Exhaustive search would visit more states than allowed."""


@dataclass(frozen=True)
class EnvSpec:
    n_agents: int
    n_actions: int
    obs_dim: int
    state_dim: int
    episode_limit: int
    gamma: float = 0.99

    def __post_init__(self) -> None:
        for field in ("n_agents", "n_actions", "obs_dim", "state_dim", "episode_limit"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be >= 1, got {getattr(self, field)}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")

    @property
    def agent_input_dim(self) -> int:
        """Length of the per-agent network input (obs ++ last action ++ identity)."""
        return self.obs_dim + self.n_actions + self.n_agents


@dataclass
class StepResult:
    obs: np.ndarray  # (n_agents, obs_dim)
    state: np.ndarray  # (state_dim,)
    reward: float
    terminated: bool
    avail_actions: np.ndarray  # (n_agents, n_actions) bool


def agent_inputs(obs: np.ndarray, last_actions: np.ndarray | None, n_actions: int) -> np.ndarray:
    """Build per-agent inputs: observation, previous-action one-hot, identity one-hot.

    ``obs`` is (..., n_agents, obs_dim); ``last_actions`` holds action indices
    with shape (..., n_agents) or is None at the first step.
    """
    obs = np.asarray(obs, dtype=np.float64)
    lead, n_agents = obs.shape[:-2], obs.shape[-2]
    prev = np.zeros(lead + (n_agents, n_actions))
    if last_actions is not None:
        np.put_along_axis(prev, np.asarray(last_actions)[..., None], 1.0, axis=-1)
    ident = np.broadcast_to(np.eye(n_agents), lead + (n_agents, n_agents))
    return np.concatenate([obs, prev, ident], axis=-1)


class CooperativeEnv:
    """Shared lifecycle handling for the toy environments."""

    name = "base"

    def __init__(self, spec: EnvSpec) -> None:
        self.spec = spec
        self._t = 0
        self._terminated = True
        self._rng = np.random.default_rng(0)

    # hooks for subclasses
    def _sample_hidden(self, rng: np.random.Generator) -> Any:
        raise NotImplementedError

    def _observe(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def _state(self) -> np.ndarray:
        raise NotImplementedError

    def _reward(self, actions: np.ndarray) -> float:
        raise NotImplementedError

    def reset(self, seed: int) -> StepResult:
        self._rng = np.random.default_rng(seed)
        self._hidden = self._sample_hidden(self._rng)
        self._t = 0
        self._terminated = False
        return StepResult(self._observe(self._rng), self._state(), 0.0, False, self._avail())

    def _avail(self) -> np.ndarray:
        n, a = self.spec.n_agents, self.spec.n_actions
        if self._terminated:
            mask = np.zeros((n, a), dtype=bool)
            mask[:, -1] = True  # post-termination padding action
            return mask
        return np.ones((n, a), dtype=bool)

    def step(self, actions) -> StepResult:
        if self._terminated:
            raise ContractViolation("step() called on a terminated episode; call reset() first")
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (self.spec.n_agents,):
            raise ContractViolation(f"expected {self.spec.n_agents} actions, got shape {actions.shape}")
        avail = self._avail()
        for agent, action in enumerate(actions):
            if not (0 <= action < self.spec.n_actions) or not avail[agent, action]:
                raise ContractViolation(f"agent {agent} chose unavailable action {int(action)}")
        reward = self._reward(actions)
        self._t += 1
        self._terminated = self._t >= self.spec.episode_limit
        obs = self._observe(self._rng)
        return StepResult(obs, self._state(), reward, self._terminated, self._avail())

    # exhaustive-search hooks over the fully observed MDP
    def hidden_for_seed(self, seed: int) -> Hashable:
        return _freeze(self._sample_hidden(np.random.default_rng(seed)))

    def full_reward(self, hidden: Hashable, actions: tuple[int, ...]) -> float:
        raise NotImplementedError


def _freeze(x) -> Hashable:
    return tuple(np.asarray(x).tolist()) if isinstance(x, np.ndarray) else x


class HeterogeneousJobs(CooperativeEnv):
    """Agents with hidden aptitudes must staff jobs matching those aptitudes.

    Each episode assigns every agent one of ``n_jobs`` aptitude types in a
    balanced random permutation. An agent sees its aptitude only through a
    noisy signal: +signal at its own type and -signal elsewhere, plus
    Gaussian noise, clipped to [-1, 1]. Actions are "work on job i" for each
    job followed by a no-op. Per step, every job staffed by at least one agent
    of the matching type pays 1, and every job with more workers than its
    capacity ceil(n_agents / n_jobs) costs 0.1; the step reward is floored at 0.
    """

    name = "heterogeneous_jobs"

    def __init__(
        self,
        n_agents: int = 4,
        n_jobs: int = 2,
        episode_limit: int = 25,
        noise: float = 0.3,
        signal: float = 0.3,
        overstaff_penalty: float = 0.1,
        gamma: float = 0.99,
    ) -> None:
        if n_agents < 1 or n_jobs < 1:
            raise ValueError("n_agents and n_jobs must be >= 1")
        self.n_jobs = n_jobs
        self.noise = noise
        self.signal = signal
        self.overstaff_penalty = overstaff_penalty
        self.capacity = -(-n_agents // n_jobs)
        super().__init__(
            EnvSpec(
                n_agents=n_agents,
                n_actions=n_jobs + 1,
                obs_dim=n_jobs,
                state_dim=n_agents * n_jobs + 1,
                episode_limit=episode_limit,
                gamma=gamma,
            )
        )

    @property
    def noop(self) -> int:
        return self.n_jobs

    @property
    def aptitudes(self) -> np.ndarray:
        return self._hidden

    def _sample_hidden(self, rng):
        types = np.arange(self.spec.n_agents) % self.n_jobs
        return rng.permutation(types)

    def _observe(self, rng):
        n, j = self.spec.n_agents, self.n_jobs
        mean = np.full((n, j), -self.signal)
        mean[np.arange(n), self._hidden] = self.signal
        return np.clip(mean + rng.normal(0.0, self.noise, size=(n, j)), -1.0, 1.0)

    def _state(self):
        onehot = np.zeros((self.spec.n_agents, self.n_jobs))
        onehot[np.arange(self.spec.n_agents), self._hidden] = 1.0
        return np.concatenate([onehot.reshape(-1), [self._t / self.spec.episode_limit]])

    def staffing(self, hidden, actions) -> tuple[int, int]:
        """(# jobs staffed by a matching agent, # overstaffed jobs)."""
        hidden = np.asarray(hidden)
        actions = np.asarray(actions)
        staffed = overstaffed = 0
        for job in range(self.n_jobs):
            workers = actions == job
            staffed += bool(np.any(workers & (hidden == job)))
            overstaffed += int(workers.sum()) > self.capacity
        return staffed, overstaffed

    def full_reward(self, hidden, actions) -> float:
        staffed, overstaffed = self.staffing(hidden, actions)
        return max(0.0, staffed - self.overstaff_penalty * overstaffed)

    def _reward(self, actions):
        return self.full_reward(self._hidden, actions)


class TwoRolesMatrix(CooperativeEnv):
    """Repeated matrix game paying off only when the team splits evenly.

    Actions are X (0) and Y (1). The step reward is ``payoff`` when exactly
    half of the agents choose X and the rest choose Y, and 0 otherwise.
    Observations carry no information beyond a constant bias feature, so
    agents can only tell roles apart by identity.
    """

    name = "two_roles_matrix"

    def __init__(self, n_agents: int = 4, episode_limit: int = 1, payoff: float = 1.0, gamma: float = 0.99) -> None:
        if n_agents % 2:
            raise ValueError("TwoRolesMatrix needs an even number of agents")
        self.payoff = payoff
        super().__init__(
            EnvSpec(n_agents=n_agents, n_actions=2, obs_dim=1, state_dim=1, episode_limit=episode_limit, gamma=gamma)
        )

    def _sample_hidden(self, rng):
        return None

    def _observe(self, rng):
        return np.ones((self.spec.n_agents, 1))

    def _state(self):
        return np.array([self._t / self.spec.episode_limit])

    def full_reward(self, hidden, actions) -> float:
        n_x = int(np.sum(np.asarray(actions) == 0))
        return self.payoff if 2 * n_x == self.spec.n_agents else 0.0

    def _reward(self, actions):
        return self.full_reward(None, actions)


ENVIRONMENTS: dict[str, Callable[..., CooperativeEnv]] = {
    HeterogeneousJobs.name: HeterogeneousJobs,
    TwoRolesMatrix.name: TwoRolesMatrix,
}


def make_env(name: str, **params) -> CooperativeEnv:
    try:
        factory = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; known: {sorted(ENVIRONMENTS)}") from None
    return factory(**params)


def oracle_return(env: CooperativeEnv, seed: int, budget: int = 10**6, gamma: float | None = None) -> float:
    """Optimal discounted return for the episode drawn by ``seed``.

    ``gamma`` overrides the environment's discount (1.0 gives the plain sum).

    Solves the fully observed MDP (hidden variables revealed) by depth-first
    search with memoisation over (hidden, t), enumerating every joint action.
    In both toy environments the hidden variables are fixed for the episode and
    the reward depends only on (hidden, joint action), so the memo is small.
    """
    spec = env.spec
    joint_actions = list(itertools.product(range(spec.n_actions), repeat=spec.n_agents))
    work = len(joint_actions) * spec.episode_limit
    if work > budget:
        raise SearchBudgetExceeded(
            f"exhaustive search needs {work} evaluations, budget is {budget}"
        )
    gamma = spec.gamma if gamma is None else gamma
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    hidden = env.hidden_for_seed(seed)
    best_step = max(env.full_reward(hidden, u) for u in joint_actions)

    @lru_cache(maxsize=None)
    def value(t: int) -> float:
        if t >= spec.episode_limit:
            return 0.0
        return best_step + gamma * value(t + 1)

    return value(0)


def discounted_return(rewards, gamma: float) -> float:
    total = 0.0
    for r in reversed(list(rewards)):
        total = r + gamma * total
    return total
