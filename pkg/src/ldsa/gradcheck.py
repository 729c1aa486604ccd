"""Finite-difference check of the full training loss on a tiny batch."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .autodiff import grad_check_params
from .envs import HeterogeneousJobs
from .model import LDSANetwork, Learner, rollout
from .replay import EpisodeBatch
from .selection import sample_gumbel


@dataclass
class GradCheckReport:
    max_error: float
    block_errors: dict[str, float]
    parameter_count: int
    seconds: float

    def worst_block(self) -> str:
        return max(self.block_errors, key=self.block_errors.get)


def micro_batch(n_agents: int = 2, steps: int = 3, episodes: int = 2, seed: int = 0) -> tuple[HeterogeneousJobs, EpisodeBatch]:
    env = HeterogeneousJobs(n_agents=n_agents, n_jobs=2, episode_limit=steps)
    rng = np.random.default_rng(seed)
    probe = LDSANetwork(env.spec, rng, k=2, m=4, hidden=4, mixing_embed=4, encoder_hidden=4)
    envs = [HeterogeneousJobs(n_agents=n_agents, n_jobs=2, episode_limit=steps) for _ in range(episodes)]
    res = rollout(probe, envs, list(range(seed, seed + episodes)), epsilon=1.0, explore=True, rng=rng)
    return env, EpisodeBatch.from_episodes(res.episodes)


def composite_grad_check(
    seed: int = 0,
    k: int = 2,
    width: int = 8,
    steps: int = 3,
    lambda_phi: float = 0.5,
    lambda_h: float = 0.5,
    h: float = 1e-5,
    ablation: str = "none",
) -> GradCheckReport:
    """Compare backprop against central differences for every parameter block.

    The Gumbel noise is drawn once and held fixed so the loss is a deterministic
    function of the parameters. A straight-through sample is flat almost
    everywhere, so finite differences cannot see the gradient it passes back;
    the check therefore runs the soft relaxation, which shares that backward
    path. Both regularisers get nonzero weight so their gradients are
    exercised too.
    """
    start = time.perf_counter()
    env, batch = micro_batch(steps=steps, seed=seed)
    rng = np.random.default_rng(seed + 1)
    net = LDSANetwork(env.spec, rng, k=k, m=width, hidden=width, mixing_embed=width, encoder_hidden=width, ablation=ablation)
    net.relaxed_selection = True
    learner = Learner(net, gamma=env.spec.gamma, lambda_phi=lambda_phi, lambda_h=lambda_h, rng=rng)
    # Perturb the target copy so the bootstrap term is not a copy of the online values.
    for p in learner.target.parameters().values():
        p.values = p.values + rng.normal(scale=0.1, size=p.shape)
    T, B, n = batch.actions.shape
    noise = sample_gumbel(rng, (T + 1, B * n, k))

    def loss():
        learner.rng = np.random.default_rng(seed + 2)  # same random selections on every call
        return learner.losses(batch, noise=noise).total

    errors = {name: grad_check_params(loss, [p], h) for name, p in net.parameters().items()}
    return GradCheckReport(
        max_error=max(errors.values()),
        block_errors=errors,
        parameter_count=net.parameter_count(),
        seconds=time.perf_counter() - start,
    )
