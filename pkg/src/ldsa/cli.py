"""Command-line entry point: ``ldsa <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, RunConfig
from .gradcheck import composite_grad_check
from .harness import evaluate, sweep_k, train, write_timelines

GRAD_TOLERANCE = 1e-4


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.ablation is not None:
        overrides.append(f"ablation={args.ablation}")
    if args.config:
        return RunConfig.from_file(args.config, overrides)
    return RunConfig.from_text("", overrides)


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--ablation")
    p.add_argument("--out-dir", required=True)


def cmd_train(args) -> int:
    config = _config_from_args(args)
    result = train(config, args.out_dir)
    print(json.dumps({"final": result.final, "checkpoint": str(result.checkpoint)}, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    result = evaluate(args.checkpoint, args.episodes, args.seed, args.out_dir)
    print(json.dumps({
        "mean_return": result.mean_return,
        "oracle_return": result.oracle_return,
        "normalized_return": result.normalized_return,
        "switch_count": result.switch_count,
        "subtask_usage": result.subtask_usage,
    }, sort_keys=True))
    return 0


def cmd_sweep_k(args) -> int:
    config = _config_from_args(args)
    ks = [int(v) for v in args.k_values.split(",") if v.strip()]
    for row in sweep_k(config, ks, args.out_dir):
        print(json.dumps(row, sort_keys=True))
    return 0


def cmd_grad_check(args) -> int:
    report = composite_grad_check(seed=args.seed or 0, width=args.width, ablation=args.ablation or "none")
    for name, err in report.block_errors.items():
        print(f"{name:32s} {err:.3e}")
    ok = report.max_error < GRAD_TOLERANCE
    print(f"max relative error {report.max_error:.3e} over {report.parameter_count} parameters "
          f"in {report.seconds:.1f}s: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_export_timeline(args) -> int:
    result = evaluate(args.checkpoint, args.episodes, args.seed)
    paths = write_timelines(result, args.out_dir)
    print(f"wrote {len(paths)} timeline files to {args.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldsa", description="Subtask-selection MARL trainer on toy cooperative tasks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run, writing metrics.jsonl and checkpoints")
    _add_run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="greedy evaluation of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", help="also write per-episode timelines here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-k", help="train once per subtask count; k=1 is the shared baseline")
    _add_run_options(p)
    p.add_argument("--k-values", default="1,2,4")
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("grad-check", help="finite-difference check of the full loss on a micro-batch")
    p.add_argument("--seed", type=int)
    p.add_argument("--ablation")
    p.add_argument("--width", type=int, default=8)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("export-timeline", help="write subtask timelines for greedy episodes of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_export_timeline)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
