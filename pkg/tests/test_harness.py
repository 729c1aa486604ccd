import csv
import json

import numpy as np
import pytest

from ldsa.checkpoint import CheckpointFormatError, build_network, load_checkpoint, read_manifest, save_checkpoint
from ldsa.cli import main
from ldsa.config import ConfigError, RunConfig
from ldsa.envs import HeterogeneousJobs, TwoRolesMatrix
from ldsa.harness import (
    evaluate,
    evaluate_network,
    match_hidden_width,
    resolve_config,
    sweep_k,
    train,
    validate_metrics_file,
    write_timelines,
)
from ldsa.model import ABLATIONS, LDSANetwork, Learner, rollout
from ldsa.replay import EpisodeBatch

TINY = [
    "k=2", "m=6", "hidden_dim=6", "encoder_hidden=6", "mixing_embed=6",
    "env.episode_limit=5", "total_timesteps=100", "eval_interval=50",
    "eval_episodes=3", "batch_size=4", "buffer_size=50", "target_update_interval=5",
]


def tiny(*extra):
    return RunConfig.from_text("", [*TINY, *extra])


class TestConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert (cfg.k, cfg.m, cfg.hidden_dim, cfg.mixing_embed) == (4, 64, 64, 32)
        assert (cfg.lr, cfg.rms_alpha, cfg.rms_eps, cfg.grad_clip) == (5e-4, 0.99, 1e-5, 10.0)
        assert (cfg.batch_size, cfg.buffer_size, cfg.epsilon_anneal_time) == (32, 5000, 50_000)

    def test_text_round_trip(self):
        cfg = tiny("env.n_jobs=2", "double_q=true", "stop_at_normalized_return=0.9")
        again = RunConfig.from_text(cfg.to_text())
        assert again == cfg
        assert again.digest() == cfg.digest()

    def test_file_with_comments_and_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# experiment\nk = 3\nlambda_h = 0.5  # smoother\n\nenv = two_roles_matrix\n")
        cfg = RunConfig.from_file(path, ["k=5"])
        assert cfg.k == 5 and cfg.lambda_h == 0.5 and cfg.env == "two_roles_matrix"

    @pytest.mark.parametrize(
        "bad",
        [["nonsense=1"], ["k=0"], ["ablation=Bogus"], ["lambda_phi=-1"], ["k=two"], ["double_q=maybe"],
         ["batch_size=10", "buffer_size=5"], ["justtext"]],
    )
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            RunConfig.from_text("", bad)

    def test_digest_changes(self):
        assert tiny().digest() != tiny("seed=1").digest()


class TestNetwork:
    @pytest.mark.parametrize("ablation", ABLATIONS)
    def test_every_ablation_runs(self, ablation):
        env = HeterogeneousJobs(n_agents=3, n_jobs=2, episode_limit=4)
        cfg = tiny(f"ablation={ablation}", "env.n_agents=3", "env.episode_limit=4", "m=16", "hidden_dim=16")
        net = build_network(resolve_config(cfg), np.random.default_rng(0))
        res = rollout(net, [HeterogeneousJobs(n_agents=3, episode_limit=4) for _ in range(2)], [0, 1],
                      epsilon=0.5, explore=True, rng=np.random.default_rng(1))
        batch = EpisodeBatch.from_episodes(res.episodes)
        learner = Learner(net, gamma=env.spec.gamma, rng=np.random.default_rng(2))
        terms = learner.train_step(batch)
        assert np.isfinite(terms.total.item())

    def test_shared_baseline_is_single_subtask(self):
        cfg = tiny("ablation=SharedBaseline")
        net = build_network(cfg)
        assert net.k == 1 and net.representations() is None
        assert "heads.weight" in net.parameters()
        assert not any(name.startswith(("encoder", "ability", "decoder")) for name in net.parameters())

    def test_random_selection_ignores_probs(self):
        env = HeterogeneousJobs(n_agents=4, episode_limit=5)
        net = LDSANetwork(env.spec, np.random.default_rng(0), k=3, m=6, hidden=6, mixing_embed=6,
                          encoder_hidden=6, ablation="RanSele")
        x = np.random.default_rng(1).normal(size=(200, 4, env.spec.agent_input_dim))
        out = net.agent_forward(x, rng=np.random.default_rng(2))
        counts = np.bincount(out.index.reshape(-1), minlength=3) / out.index.size
        np.testing.assert_allclose(counts, 1 / 3, atol=0.03)
        assert out.weights.node_id is None  # no gradient path into selection

    def test_large_baseline_matches_parameter_count(self):
        cfg = RunConfig(k=4)
        width = match_hidden_width(cfg)
        reference = build_network(cfg).parameter_count()
        large = build_network(cfg.replace(ablation="QMIXLarge", hidden_dim=width)).parameter_count()
        assert abs(large - reference) / reference <= 0.05
        assert width > cfg.hidden_dim

    def test_large_baseline_unmatchable_at_tiny_width(self):
        with pytest.raises(ValueError, match="within 5%"):
            match_hidden_width(tiny("env.n_agents=3"))


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        cfg = tiny()
        net = build_network(cfg, np.random.default_rng(5))
        before = evaluate_network(net, cfg)
        save_checkpoint(tmp_path / "ckpt", net, cfg, timestep=42)
        loaded, cfg2, t = load_checkpoint(tmp_path / "ckpt")
        assert t == 42 and cfg2 == cfg
        for name, p in net.parameters().items():
            assert np.array_equal(p.values, loaded.parameters()[name].values)
        after = evaluate_network(loaded, cfg2)
        assert after.mean_return == before.mean_return
        np.testing.assert_array_equal(after.returns, before.returns)

    def test_manifest_and_raw_blocks(self, tmp_path):
        cfg = tiny()
        net = build_network(cfg)
        save_checkpoint(tmp_path / "ckpt", net, cfg)
        info = read_manifest(tmp_path / "ckpt")
        assert info["format_version"] == "1" and info["config_hash"] == cfg.digest()
        name, dims, fname = info["blocks"][0]
        raw = np.fromfile(tmp_path / "ckpt" / fname, dtype="<f8")
        assert raw.size == int(np.prod(dims))
        np.testing.assert_array_equal(raw.reshape(dims), net.parameters()[name].values)
        assert not (tmp_path / "ckpt.tmp").exists()

    def test_shape_mismatch(self, tmp_path):
        cfg = tiny()
        save_checkpoint(tmp_path / "ckpt", build_network(cfg), cfg)
        with pytest.raises(CheckpointFormatError, match="shape"):
            load_checkpoint(tmp_path / "ckpt", cfg.replace(hidden_dim=7))

    def test_version_mismatch(self, tmp_path):
        cfg = tiny()
        save_checkpoint(tmp_path / "ckpt", build_network(cfg), cfg)
        manifest = tmp_path / "ckpt" / "manifest.txt"
        manifest.write_text(manifest.read_text().replace("format_version 1", "format_version 9"))
        with pytest.raises(CheckpointFormatError, match="format"):
            load_checkpoint(tmp_path / "ckpt")

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointFormatError):
            read_manifest(tmp_path / "nothing")


class TestTraining:
    def test_metrics_file(self, tmp_path):
        res = train(tiny(), tmp_path)
        assert validate_metrics_file(tmp_path / "metrics.jsonl") == len(res.metrics) == 3
        header = json.loads((tmp_path / "metrics.jsonl").read_text().splitlines()[0])
        assert header["ablation"] == "none" and header["config_hash"] == tiny().digest()
        first = res.metrics[0]
        assert first["timestep"] == 0 and first["loss_td"] is None
        assert res.final["timestep"] >= 100
        reps = sorted((tmp_path / "representations").glob("*.csv"))
        assert len(reps) == 3
        assert len(reps[0].read_text().splitlines()) == 1 + 2  # header + k rows

    def test_bit_identical_reruns(self, tmp_path):
        train(tiny(), tmp_path / "a")
        train(tiny(), tmp_path / "b")
        assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()

    def test_seed_changes_run(self):
        assert train(tiny()).metrics != train(tiny("seed=1")).metrics

    def test_checkpoint_reproduces_last_eval(self, tmp_path):
        res = train(tiny(), tmp_path)
        ev = evaluate(tmp_path / "checkpoint")
        assert ev.mean_return == res.final["eval_return"]

    def test_untrained_baseline_recorded(self):
        res = train(tiny("total_timesteps=1"))
        assert res.metrics[0]["episodes"] == 0
        assert 0.0 <= res.metrics[0]["normalized_return"] <= 1.0

    def test_early_stop(self):
        # the untrained eval at t=0 never stops a run; the first later eval does
        res = train(tiny("total_timesteps=1000", "stop_at_normalized_return=0.0"))
        assert len(res.metrics) == 2 and res.final["timestep"] < 1000

    def test_metrics_validation_rejects_garbage(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"type": "header", "ablation": "none"}\n{"type": "eval", "timestep": 1}\n')
        with pytest.raises(ValueError):
            validate_metrics_file(path)


def test_timeline_csv(tmp_path):
    cfg = tiny()
    ev = evaluate_network(build_network(cfg), cfg)
    paths = write_timelines(ev, tmp_path)
    assert len(paths) == 3
    rows = list(csv.reader(paths[0].open()))
    assert rows[0] == ["timestep", "agent", "subtask", "p0", "p1"]
    assert len(rows) == 1 + 5 * 4
    for row in rows[1:]:
        probs = [float(v) for v in row[3:]]
        assert abs(sum(probs) - 1.0) < 1e-12
        assert int(row[2]) == int(np.argmax(probs))


def test_sweep_k(tmp_path):
    rows = sweep_k(tiny("total_timesteps=30"), [2, 1], tmp_path)
    assert [r["k"] for r in rows] == [1, 2]
    assert rows[0]["ablation"] == "SharedBaseline"
    assert (tmp_path / "summary.csv").exists() and (tmp_path / "k1" / "metrics.jsonl").exists()


class TestCLI:
    def test_train_evaluate_export(self, tmp_path, capsys):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("\n".join(TINY) + "\n")
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg_file), "--seed", "3", "--set", "lambda_h=0.01", "--out-dir", str(out)]) == 0
        stored = RunConfig.from_file(out / "config.txt")
        assert stored.seed == 3 and stored.lambda_h == 0.01
        capsys.readouterr()
        assert main(["evaluate", str(out / "checkpoint")]) == 0
        result = json.loads(capsys.readouterr().out)
        assert set(result) >= {"mean_return", "normalized_return", "switch_count"}
        assert main(["export-timeline", str(out / "checkpoint"), "--episodes", "2", "--out-dir", str(tmp_path / "tl")]) == 0
        assert len(list((tmp_path / "tl").glob("*.csv"))) == 2

    def test_ablation_flag(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("\n".join(TINY) + "\n")
        assert main(["train", "--config", str(cfg_file), "--ablation", "NoDecoder", "--out-dir", str(tmp_path / "r")]) == 0
        header = json.loads((tmp_path / "r" / "metrics.jsonl").read_text().splitlines()[0])
        assert header["ablation"] == "NoDecoder"

    def test_sweep_k_command(self, tmp_path, capsys):
        args = ["sweep-k", "--k-values", "1,2", "--out-dir", str(tmp_path)]
        for item in [*TINY, "total_timesteps=20"]:
            args += ["--set", item]
        assert main(args) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert [json.loads(ln)["k"] for ln in lines] == [1, 2]

    def test_bad_config_exit_code(self, tmp_path, capsys):
        assert main(["train", "--set", "k=0", "--out-dir", str(tmp_path)]) == 2
        assert "k must be positive" in capsys.readouterr().err

    def test_grad_check_command(self, capsys):
        assert main(["grad-check", "--width", "4"]) == 0
        assert "PASS" in capsys.readouterr().out


def test_two_roles_env_trains():
    cfg = tiny("env=two_roles_matrix", "env.n_agents=2", "env.episode_limit=1")
    res = train(cfg)
    assert res.final["oracle_return"] == pytest.approx(TwoRolesMatrix(n_agents=2).payoff)
