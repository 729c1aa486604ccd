"""LDSA network assembly, ablation variants, the learner and batched rollouts."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .envs import CooperativeEnv, EnvSpec, agent_inputs, discounted_return
from .layers import Linear
from .mixing import Mixer, masked_mean, td_error_terms
from .optim import RMSprop, clip_grad_norm
from .policy import FreeSubtaskHeads, SubtaskDecoder, TrajectoryEncoderTau, combine_q, per_subtask_q
from .replay import Episode, EpisodeBatch
from .representation import SubtaskEncoder, repr_regularizer
from .selection import TrajectoryEncoderH, gumbel_st_sample, one_hot, selection_logits, temporal_kl_regularizer

ABLATIONS = (
    "none",
    "NP",
    "NR",
    "NP+NR",
    "NoDecoder",
    "RanSele",
    "DireProb",
    "Mix",
    "SharedBaseline",
    "QMIXLarge",
)
SHARED_MODES = ("SharedBaseline", "QMIXLarge")


@dataclass
class AgentOutput:
    q: Tensor  # (T, N, A) combined individual Q
    q_sub: Tensor  # (T, N, k, A)
    probs: Tensor  # (T, N, k)
    weights: Tensor  # (T, N, k) one-hot (or probs in Mix mode)
    index: np.ndarray  # (T, N) selected subtask
    representations: Tensor | None
    h_ability: Tensor | None
    h_history: Tensor


class LDSANetwork:
    """All learnable parts: subtask encoder, two trajectory encoders, decoder, mixer."""

    def __init__(
        self,
        env_spec: EnvSpec,
        rng: np.random.Generator,
        k: int = 4,
        m: int = 64,
        hidden: int = 64,
        mixing_embed: int = 32,
        encoder_hidden: int = 64,
        ablation: str = "none",
        temperature: float = 1.0,
    ) -> None:
        if ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
        self.env_spec = env_spec
        self.ablation = ablation
        self.shared = ablation in SHARED_MODES
        self.k = 1 if self.shared else k
        self.m, self.hidden, self.temperature = m, hidden, temperature
        # Swap the straight-through sample for its soft relaxation (gradient checks).
        self.relaxed_selection = False
        input_dim = env_spec.agent_input_dim
        n_actions = env_spec.n_actions

        self.encoder = self.ability = self.direct_head = None
        if not self.shared:
            self.encoder = SubtaskEncoder(rng, self.k, m, encoder_hidden)
            self.ability = TrajectoryEncoderH(rng, input_dim, hidden, m)
            if ablation == "DireProb":
                self.direct_head = Linear(rng, m, self.k, "selection.direct")
        self.history = TrajectoryEncoderTau(rng, input_dim, hidden)
        if self.shared or ablation == "NoDecoder":
            self.heads = FreeSubtaskHeads(rng, self.k, hidden, n_actions)
        else:
            self.heads = SubtaskDecoder(rng, m, hidden, n_actions)
        self.mixer = Mixer(rng, env_spec.n_agents, env_spec.state_dim, mixing_embed)

    # parameters

    def parameters(self) -> dict[str, Tensor]:
        parts = [self.encoder, self.ability, self.direct_head, self.history, self.heads, self.mixer]
        out: dict[str, Tensor] = {}
        for part in parts:
            if part is None:
                continue
            for p in part.parameters():
                out[p.name] = p
        return out

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(values) != set(params):
            missing = sorted(set(params) - set(values))
            extra = sorted(set(values) - set(params))
            raise ValueError(f"parameter blocks differ (missing {missing}, unexpected {extra})")
        for name, p in params.items():
            v = np.asarray(values[name], dtype=np.float64)
            if v.shape != p.shape:
                raise ValueError(f"block {name!r}: expected shape {p.shape}, got {v.shape}")
            p.values = v.copy()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.parameters().items()}

    # forward

    def representations(self) -> Tensor | None:
        return None if self.encoder is None else self.encoder.encode()

    def init_hidden(self, n: int) -> tuple[Tensor | None, Tensor]:
        h_ability = None if self.ability is None else self.ability.init_hidden(n)
        return h_ability, self.history.init_hidden(n)

    def agent_forward(
        self,
        inputs,
        hidden: tuple[Tensor | None, Tensor] | None = None,
        explore: bool = False,
        rng: np.random.Generator | None = None,
        noise: np.ndarray | None = None,
    ) -> AgentOutput:
        """Run all agents over inputs (T, N, input_dim).

        With ``explore`` the subtask is drawn by straight-through Gumbel-Softmax;
        otherwise the most probable subtask is taken. RanSele and Mix override
        both behaviours.
        """
        x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
        T, N = x.shape[:2]
        h_ability, h_history = hidden if hidden is not None else self.init_hidden(N)
        reps = self.representations()

        if self.shared:
            probs = Tensor(np.ones((T, N, 1)))
            weights = probs
            index = np.zeros((T, N), dtype=np.int64)
        else:
            x_tau, h_ability = self.ability.unroll(x, h_ability)
            if self.direct_head is not None:
                logits = self.direct_head(x_tau)
            else:
                logits = selection_logits(x_tau, reps)
            probs = ad.softmax(logits, axis=-1)
            if self.ablation == "RanSele":
                if rng is None:
                    raise ValueError("random selection needs an rng")
                index = rng.integers(self.k, size=(T, N))
                weights = Tensor(one_hot(index, self.k))
            elif self.ablation == "Mix":
                weights = probs
                index = np.argmax(probs.values, axis=-1)
            elif explore:
                if noise is None and rng is None:
                    raise ValueError("exploratory selection needs an rng or fixed noise")
                weights, index = gumbel_st_sample(probs, self.temperature, rng, noise, hard=not self.relaxed_selection)
            else:
                index = np.argmax(probs.values, axis=-1)
                weights = Tensor(one_hot(index, self.k))

        hs, h_history = self.history.unroll(x, h_history)
        w, b = self.heads.decode(reps)
        q_sub = per_subtask_q(hs, w, b)
        soft = self.ablation == "Mix" or (explore and self.relaxed_selection and self.ablation != "RanSele")
        q = combine_q(q_sub, weights, hard=not soft)
        return AgentOutput(q, q_sub, probs, weights, index, reps, h_ability, h_history)


def copy_network(net: LDSANetwork, rng: np.random.Generator | None = None) -> LDSANetwork:
    """Structural copy holding frozen (no-grad) copies of the parameter values."""
    clone = LDSANetwork(
        net.env_spec,
        rng if rng is not None else np.random.default_rng(0),
        k=net.k,
        m=net.m,
        hidden=net.hidden,
        mixing_embed=net.mixer.embed_dim,
        encoder_hidden=net.encoder.fc1.weight.shape[1] if net.encoder is not None else 64,
        ablation=net.ablation,
        temperature=net.temperature,
    )
    clone.load_values(net.snapshot())
    for p in clone.parameters().values():
        p.requires_grad = False
    return clone


def batch_inputs(batch: EpisodeBatch, n_actions: int) -> np.ndarray:
    """Agent inputs for every stored observation: (T+1, B * n_agents, input_dim)."""
    T1, B, n = batch.obs.shape[:3]
    last = np.zeros((T1, B, n), dtype=np.int64)
    last[1:] = batch.actions
    inputs = agent_inputs(batch.obs, last, n_actions)
    inputs[0, :, :, batch.obs.shape[-1] : batch.obs.shape[-1] + n_actions] = 0.0
    return inputs.reshape(T1, B * n, -1)


@dataclass
class LossTerms:
    total: Tensor
    td: float
    phi: float
    h: float


class Learner:
    """Computes the composite objective and applies RMSprop updates."""

    def __init__(
        self,
        network: LDSANetwork,
        gamma: float = 0.99,
        lambda_phi: float = 1e-3,
        lambda_h: float = 1e-3,
        lr: float = 5e-4,
        rms_alpha: float = 0.99,
        rms_eps: float = 1e-5,
        grad_clip: float = 10.0,
        double_q: bool = False,
        kl_stop_gradient_next: bool = False,
        rng: np.random.Generator | None = None,
    ) -> None:
        if lambda_phi < 0 or lambda_h < 0:
            raise ValueError("regularizer coefficients must be non-negative")
        self.network = network
        self.target = copy_network(network)
        self.gamma = gamma
        self.lambda_phi = 0.0 if network.ablation in ("NR", "NP+NR") else lambda_phi
        self.lambda_h = 0.0 if network.ablation in ("NP", "NP+NR") else lambda_h
        self.grad_clip = grad_clip
        self.double_q = double_q
        self.kl_stop_gradient_next = kl_stop_gradient_next
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.optimizer = RMSprop(list(network.parameters().values()), lr, rms_alpha, rms_eps)

    def update_targets(self) -> None:
        self.target.load_values(self.network.snapshot())
        for p in self.target.parameters().values():
            p.requires_grad = False

    def target_q_tot(self, batch: EpisodeBatch, inputs: np.ndarray, online_q: np.ndarray | None = None) -> np.ndarray:
        """max over available joint actions of the target Q_tot at t+1, shape (T, B)."""
        T, B, n = batch.actions.shape
        A = self.network.env_spec.n_actions
        out = self.target.agent_forward(inputs, explore=False, rng=self.rng)
        q_next = out.q.values.reshape(T + 1, B, n, A)[1:]
        avail = batch.avail[1:]
        if self.double_q and online_q is not None:
            masked = np.where(avail, online_q[1:], -np.inf)
        else:
            masked = np.where(avail, q_next, -np.inf)
        greedy = np.argmax(masked, axis=-1)
        best = np.take_along_axis(q_next, greedy[..., None], axis=-1)[..., 0]
        states = batch.state[1:].reshape(T * B, -1)
        return self.target.mixer.mix(best.reshape(T * B, n), states).values.reshape(T, B)

    def losses(self, batch: EpisodeBatch, noise: np.ndarray | None = None) -> LossTerms:
        net = self.network
        T, B, n = batch.actions.shape
        if batch.filled.sum() == 0:
            raise ValueError("cannot compute a loss on an empty batch")
        A = net.env_spec.n_actions
        inputs = batch_inputs(batch, A)
        out = net.agent_forward(inputs, explore=True, rng=self.rng, noise=noise)
        q = out.q.reshape(T + 1, B, n, A)
        chosen = ad.gather(q[:-1], batch.actions)  # (T, B, n)
        q_tot = net.mixer.mix(chosen.reshape(T * B, n), batch.state[:-1].reshape(T * B, -1)).reshape(T, B)
        target = self.target_q_tot(batch, inputs, q.values if self.double_q else None)
        td = masked_mean(td_error_terms(q_tot, batch.reward, batch.terminated, target, self.gamma), batch.filled)
        total = td
        phi_val = h_val = 0.0
        if out.representations is not None and self.lambda_phi > 0:
            l_phi = repr_regularizer(out.representations)
            phi_val = l_phi.item()
            total = total + self.lambda_phi * l_phi
        if not net.shared and self.lambda_h > 0 and T >= 2:
            probs = out.probs.reshape(T + 1, B, n, net.k)[:T]
            l_h = temporal_kl_regularizer(probs, batch.filled[1:], self.kl_stop_gradient_next)
            h_val = l_h.item()
            total = total + self.lambda_h * l_h
        return LossTerms(total, td.item(), phi_val, h_val)

    def train_step(self, batch: EpisodeBatch) -> LossTerms:
        self.optimizer.zero_grad()
        with Tape() as tape:
            terms = self.losses(batch)
            if not np.isfinite(terms.total.item()):
                raise FloatingPointError(f"non-finite loss {terms.total.item()}")
            tape.backward(terms.total)
        self.optimizer.check_finite()
        clip_grad_norm(self.optimizer.params, self.grad_clip)
        self.optimizer.step()
        return terms


@dataclass
class RolloutResult:
    episodes: list[Episode]
    returns: np.ndarray  # discounted return per episode
    raw_returns: np.ndarray
    probs: np.ndarray  # (T, E, n, k)
    index: np.ndarray  # (T, E, n)
    lengths: np.ndarray

    @property
    def steps(self) -> int:
        return int(self.lengths.sum())


def rollout(
    network: LDSANetwork,
    envs: Sequence[CooperativeEnv],
    seeds: Sequence[int],
    epsilon: float = 0.0,
    explore: bool = False,
    rng: np.random.Generator | None = None,
) -> RolloutResult:
    """Play one episode in each environment in lockstep with a batched forward pass."""
    rng = rng if rng is not None else np.random.default_rng(0)
    spec = envs[0].spec
    E, n, A = len(envs), spec.n_agents, spec.n_actions
    steps = [env.reset(seed) for env, seed in zip(envs, seeds)]
    obs = [[s.obs] for s in steps]
    states = [[s.state] for s in steps]
    avails = [[s.avail_actions] for s in steps]
    actions: list[list[np.ndarray]] = [[] for _ in range(E)]
    rewards: list[list[float]] = [[] for _ in range(E)]
    terms: list[list[bool]] = [[] for _ in range(E)]
    active = np.ones(E, dtype=bool)
    last = np.zeros((E, n), dtype=np.int64)
    hidden = network.init_hidden(E * n)
    probs_log, index_log = [], []
    t = 0
    while active.any():
        cur_obs = np.stack([o[-1] for o in obs])
        inputs = agent_inputs(cur_obs, last if t > 0 else None, A).reshape(1, E * n, -1)
        out = network.agent_forward(inputs, hidden, explore=explore, rng=rng)
        hidden = (out.h_ability, out.h_history)
        q = out.q.values.reshape(E, n, A)
        probs_log.append(out.probs.values.reshape(E, n, -1))
        index_log.append(out.index.reshape(E, n))
        avail = np.stack([a[-1] for a in avails])
        greedy = np.argmax(np.where(avail, q, -np.inf), axis=-1)
        if epsilon > 0:
            explore_mask = rng.uniform(size=(E, n)) < epsilon
            random_pick = np.array(
                [[rng.choice(np.flatnonzero(avail[e, a])) for a in range(n)] for e in range(E)]
            )
            chosen = np.where(explore_mask, random_pick, greedy)
        else:
            chosen = greedy
        for e in np.flatnonzero(active):
            res = envs[e].step(chosen[e])
            actions[e].append(chosen[e])
            rewards[e].append(res.reward)
            terms[e].append(res.terminated)
            obs[e].append(res.obs)
            states[e].append(res.state)
            avails[e].append(res.avail_actions)
            if res.terminated:
                active[e] = False
        last = chosen
        t += 1

    episodes = [
        Episode(
            obs=np.array(obs[e]),
            state=np.array(states[e]),
            avail=np.array(avails[e]),
            actions=np.array(actions[e], dtype=np.int64),
            reward=np.array(rewards[e]),
            terminated=np.array(terms[e], dtype=bool),
        )
        for e in range(E)
    ]
    gamma = spec.gamma
    return RolloutResult(
        episodes=episodes,
        returns=np.array([discounted_return(r, gamma) for r in rewards]),
        raw_returns=np.array([sum(r) for r in rewards]),
        probs=np.array(probs_log),
        index=np.array(index_log),
        lengths=np.array([len(a) for a in actions]),
    )
