"""Training and evaluation loops, sweeps, metrics and timeline output."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .checkpoint import build_network, load_checkpoint, save_checkpoint
from .config import RunConfig
from .envs import make_env, oracle_return
from .model import SHARED_MODES, LDSANetwork, Learner, rollout
from .optim import EpsilonSchedule, NonFiniteGradient
from .replay import ReplayBuffer
from .representation import representations_csv
from .selection import switch_counts

log = logging.getLogger(__name__)

METRIC_FIELDS = {
    "timestep": int,
    "episodes": int,
    "train_steps": int,
    "loss_td": (float, type(None)),
    "loss_phi": (float, type(None)),
    "loss_h": (float, type(None)),
    "eval_return": float,
    "oracle_return": float,
    "normalized_return": float,
    "switch_count": float,
    "subtask_usage": list,
    "epsilon": float,
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EvalResult:
    mean_return: float
    oracle_return: float
    normalized_return: float
    switch_count: float
    subtask_usage: list[float]
    returns: np.ndarray
    probs: np.ndarray  # (T, E, n, k)
    index: np.ndarray  # (T, E, n)
    lengths: np.ndarray


@dataclass
class TrainResult:
    config: RunConfig
    metrics: list[dict] = field(default_factory=list)
    network: LDSANetwork | None = None
    checkpoint: Path | None = None

    @property
    def final(self) -> dict:
        return self.metrics[-1]

    def best_normalized(self) -> float:
        return max(m["normalized_return"] for m in self.metrics)


def eval_seeds(seed: int, episodes: int) -> list[int]:
    return [int(s) for s in np.random.default_rng([seed, 7919]).integers(2**31 - 1, size=episodes)]


def evaluate_network(network: LDSANetwork, config: RunConfig, episodes: int | None = None, seed: int | None = None) -> EvalResult:
    """Greedy decentralised execution: argmax subtask, greedy action, no noise."""
    episodes = episodes or config.eval_episodes
    seed = config.seed if seed is None else seed
    seeds = eval_seeds(seed, episodes)
    envs = [make_env(config.env, **config.env_args) for _ in seeds]
    res = rollout(network, envs, seeds, epsilon=0.0, explore=False, rng=np.random.default_rng([seed, 104729]))
    oracles = np.array([oracle_return(envs[0], s) for s in seeds])
    oracle_total = float(oracles.sum())
    normalized = float(res.returns.sum() / oracle_total) if oracle_total > 0 else float("nan")
    k = res.probs.shape[-1]
    usage = np.zeros(k)
    for e, length in enumerate(res.lengths):
        usage += np.bincount(res.index[:length, e].reshape(-1), minlength=k)
    usage = usage / usage.sum()
    return EvalResult(
        mean_return=float(res.returns.mean()),
        oracle_return=float(oracles.mean()),
        normalized_return=normalized,
        switch_count=float(switch_counts(res.index, res.lengths).mean()),
        subtask_usage=[float(u) for u in usage],
        returns=res.returns,
        probs=res.probs,
        index=res.index,
        lengths=res.lengths,
    )


def match_hidden_width(config: RunConfig, tolerance: float = 0.05) -> int:
    """Shared-baseline hidden width whose parameter count is closest to LDSA's."""
    reference = build_network(config.replace(ablation="none")).parameter_count()
    best, best_gap = config.hidden_dim, float("inf")
    for width in range(4, 8 * config.hidden_dim + 1):
        count = build_network(config.replace(ablation="SharedBaseline", hidden_dim=width)).parameter_count()
        gap = abs(count - reference) / reference
        if gap < best_gap:
            best, best_gap = width, gap
        if count > reference:
            break
    if best_gap > tolerance:
        raise ValueError(f"no shared width within {tolerance:.0%} of {reference} parameters")
    return best


def resolve_config(config: RunConfig) -> RunConfig:
    if config.ablation == "QMIXLarge":
        return config.replace(hidden_dim=match_hidden_width(config.replace(ablation="none")))
    return config


def train(config: RunConfig, out_dir: str | Path | None = None) -> TrainResult:
    """One collected episode per gradient step once the buffer holds a batch."""
    config = resolve_config(config)
    streams = np.random.SeedSequence(config.seed).spawn(5)
    init_rng, env_rng, act_rng, learn_rng, buffer_rng = (np.random.default_rng(s) for s in streams)
    network = build_network(config, init_rng)
    env = make_env(config.env, **config.env_args)
    learner = Learner(
        network,
        gamma=env.spec.gamma,
        lambda_phi=config.lambda_phi,
        lambda_h=config.lambda_h,
        lr=config.lr,
        rms_alpha=config.rms_alpha,
        rms_eps=config.rms_eps,
        grad_clip=config.grad_clip,
        double_q=config.double_q,
        kl_stop_gradient_next=config.kl_stop_gradient_next,
        rng=learn_rng,
    )
    buffer = ReplayBuffer(config.buffer_size, buffer_rng)
    schedule = EpsilonSchedule(config.epsilon_start, config.epsilon_finish, config.epsilon_anneal_time)

    out = Path(out_dir) if out_dir is not None else None
    ckpt_path = None
    metrics_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt_path = out / "checkpoint"
        (out / "config.txt").write_text(config.to_text())
        metrics_file = (out / "metrics.jsonl").open("w")
        header = {
            "type": "header",
            "ablation": config.ablation,
            "config_hash": config.digest(),
            "parameter_count": network.parameter_count(),
            "config": config.as_dict(),
        }
        metrics_file.write(json.dumps(header, sort_keys=True) + "\n")

    result = TrainResult(config=config, network=network, checkpoint=ckpt_path)
    t_env = episodes = train_steps = 0
    episodes_since_target = 0
    last_eval = None
    losses: list[tuple[float, float, float]] = []

    def record_eval() -> dict:
        ev = evaluate_network(network, config)
        rec = {
            "type": "eval",
            "timestep": t_env,
            "episodes": episodes,
            "train_steps": train_steps,
            "loss_td": float(np.mean([l[0] for l in losses])) if losses else None,
            "loss_phi": float(np.mean([l[1] for l in losses])) if losses else None,
            "loss_h": float(np.mean([l[2] for l in losses])) if losses else None,
            "eval_return": ev.mean_return,
            "oracle_return": ev.oracle_return,
            "normalized_return": ev.normalized_return,
            "switch_count": ev.switch_count,
            "subtask_usage": ev.subtask_usage,
            "epsilon": schedule(t_env),
        }
        losses.clear()
        result.metrics.append(rec)
        if metrics_file is not None:
            metrics_file.write(json.dumps(rec, sort_keys=True) + "\n")
            metrics_file.flush()
            save_checkpoint(ckpt_path, network, config, t_env)
            reps = network.representations()
            if reps is not None:
                (out / "representations").mkdir(exist_ok=True)
                (out / "representations" / f"t{t_env:08d}.csv").write_text(representations_csv(reps.values))
        log.info(
            "t=%d episodes=%d return=%.3f normalized=%.3f switches=%.2f",
            t_env, episodes, ev.mean_return, ev.normalized_return, ev.switch_count,
        )
        return rec

    try:
        last_eval = 0
        record_eval()
        while t_env < config.total_timesteps:
            seed = int(env_rng.integers(2**31 - 1))
            res = rollout(network, [env], [seed], epsilon=schedule(t_env), explore=True, rng=act_rng)
            buffer.push(res.episodes[0])
            t_env += res.steps
            episodes += 1
            episodes_since_target += 1
            if buffer.can_sample(config.batch_size):
                try:
                    terms = learner.train_step(buffer.sample(config.batch_size))
                except (FloatingPointError, NonFiniteGradient) as exc:
                    raise TrainingDiverged(f"training diverged at t={t_env}: {exc}") from exc
                losses.append((terms.td, terms.phi, terms.h))
                train_steps += 1
            if episodes_since_target >= config.target_update_interval:
                learner.update_targets()
                episodes_since_target = 0
            if t_env - last_eval >= config.eval_interval or t_env >= config.total_timesteps:
                last_eval = t_env
                rec = record_eval()
                target = config.stop_at_normalized_return
                if target is not None and rec["normalized_return"] >= target:
                    log.info("reached normalized return %.3f at t=%d, stopping", rec["normalized_return"], t_env)
                    break
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return result


def evaluate(checkpoint: str | Path, episodes: int | None = None, seed: int | None = None,
             out_dir: str | Path | None = None) -> EvalResult:
    """Evaluate a saved checkpoint; never writes to the checkpoint itself."""
    network, config, _ = load_checkpoint(checkpoint)
    result = evaluate_network(network, config, episodes, seed)
    if out_dir is not None:
        write_timelines(result, out_dir)
    return result


def write_timelines(result: EvalResult, out_dir: str | Path) -> list[Path]:
    """One CSV per episode: timestep, agent, subtask, p0..p{k-1}."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    k = result.probs.shape[-1]
    paths = []
    for e, length in enumerate(result.lengths):
        path = out / f"timeline_ep{e:03d}.csv"
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["timestep", "agent", "subtask", *[f"p{i}" for i in range(k)]])
            for t in range(length):
                for a in range(result.index.shape[2]):
                    writer.writerow([t, a, int(result.index[t, e, a]), *[repr(float(p)) for p in result.probs[t, e, a]]])
        paths.append(path)
    return paths


def sweep_k(config: RunConfig, k_values: Iterable[int], out_dir: str | Path | None = None) -> list[dict]:
    """Train and evaluate once per k with shared seeds; k=1 runs the shared baseline."""
    k_values = sorted(set(int(k) for k in k_values))
    if not k_values:
        raise ValueError("k_values must not be empty")
    rows = []
    for k in k_values:
        cfg = config.replace(k=k, ablation="SharedBaseline" if k == 1 else config.ablation)
        sub = None if out_dir is None else Path(out_dir) / f"k{k}"
        res = train(cfg, sub)
        rows.append(
            {
                "k": k,
                "ablation": cfg.ablation,
                "final_normalized_return": res.final["normalized_return"],
                "best_normalized_return": res.best_normalized(),
                "final_return": res.final["eval_return"],
                "switch_count": res.final["switch_count"],
            }
        )
    if out_dir is not None:
        write_summary(rows, Path(out_dir) / "summary.csv")
    return rows


def grid_lambda(config: RunConfig, lambda_phis: Iterable[float], lambda_hs: Iterable[float],
                out_dir: str | Path | None = None) -> list[dict]:
    rows = []
    for lp in lambda_phis:
        for lh in lambda_hs:
            sub = None if out_dir is None else Path(out_dir) / f"phi{lp}_h{lh}"
            res = train(config.replace(lambda_phi=lp, lambda_h=lh), sub)
            rows.append({"lambda_phi": lp, "lambda_h": lh, "final_normalized_return": res.final["normalized_return"]})
    if out_dir is not None:
        write_summary(rows, Path(out_dir) / "summary.csv")
    return rows


def write_summary(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def validate_metrics_file(path: str | Path) -> int:
    """Check every line parses and eval records carry the expected fields; returns #evals."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError("metrics file is empty")
    header = json.loads(lines[0])
    if header.get("type") != "header" or "ablation" not in header:
        raise ValueError("first metrics line must be a header naming the ablation")
    count = 0
    for n, line in enumerate(lines[1:], 2):
        rec = json.loads(line)
        if rec.get("type") != "eval":
            raise ValueError(f"line {n}: unexpected record type {rec.get('type')!r}")
        for key, kind in METRIC_FIELDS.items():
            if key not in rec or not isinstance(rec[key], kind):
                raise ValueError(f"line {n}: field {key!r} missing or of wrong type")
        if not 0.0 <= rec["normalized_return"] <= 1.0 + 1e-12:
            raise ValueError(f"line {n}: normalized return {rec['normalized_return']} outside [0, 1]")
        count += 1
    return count


def is_shared(config: RunConfig) -> bool:
    return config.ablation in SHARED_MODES
