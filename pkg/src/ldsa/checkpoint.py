"""Checkpoints: a text manifest plus one raw little-endian float64 file per block."""
from __future__ import annotations

import shutil
from pathlib import Path

import numpy as np

from .config import RunConfig
from .envs import make_env
from .model import LDSANetwork

FORMAT_VERSION = 1
MANIFEST = "manifest.txt"
CONFIG = "config.txt"


class CheckpointFormatError(ValueError):
    pass


def build_network(config: RunConfig, rng: np.random.Generator | None = None) -> LDSANetwork:
    env = make_env(config.env, **config.env_args)
    return LDSANetwork(
        env.spec,
        rng if rng is not None else np.random.default_rng(config.seed),
        k=config.k,
        m=config.m,
        hidden=config.hidden_dim,
        mixing_embed=config.mixing_embed,
        encoder_hidden=config.encoder_hidden,
        ablation=config.ablation,
        temperature=config.temperature,
    )


def save_checkpoint(path: str | Path, network: LDSANetwork, config: RunConfig, timestep: int = 0) -> Path:
    """Write atomically: build in a sibling temp dir, then swap it in."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "blocks").mkdir(parents=True)
    lines = [
        f"format_version {FORMAT_VERSION}",
        f"config_hash {config.digest()}",
        f"timestep {timestep}",
    ]
    for i, (name, p) in enumerate(network.parameters().items()):
        fname = f"blocks/{i:03d}.bin"
        p.values.astype("<f8").tofile(tmp / fname)
        shape = "x".join(str(d) for d in p.shape)
        lines.append(f"block {name} {shape} {fname}")
    (tmp / MANIFEST).write_text("\n".join(lines) + "\n")
    (tmp / CONFIG).write_text(config.to_text())
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    manifest = path / MANIFEST
    if not manifest.exists():
        raise CheckpointFormatError(f"no manifest at {manifest}")
    info: dict = {"blocks": []}
    for line in manifest.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "block":
            if len(parts) != 4:
                raise CheckpointFormatError(f"malformed block line: {line!r}")
            _, name, shape, fname = parts
            dims = tuple(int(d) for d in shape.split("x")) if shape else ()
            info["blocks"].append((name, dims, fname))
        else:
            info[parts[0]] = parts[1] if len(parts) > 1 else ""
    version = int(info.get("format_version", -1))
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
    return info


def load_checkpoint(path: str | Path, config: RunConfig | None = None) -> tuple[LDSANetwork, RunConfig, int]:
    """Rebuild the network from the stored (or given) config and load its blocks."""
    path = Path(path)
    info = read_manifest(path)
    if config is None:
        config = RunConfig.from_file(path / CONFIG)
    network = build_network(config)
    expected = {name: p.shape for name, p in network.parameters().items()}
    values = {}
    for name, dims, fname in info["blocks"]:
        if name not in expected:
            raise CheckpointFormatError(f"checkpoint block {name!r} does not exist in the configured network")
        if dims != expected[name]:
            raise CheckpointFormatError(f"block {name!r}: checkpoint shape {dims}, network expects {expected[name]}")
        raw = np.fromfile(path / fname, dtype="<f8")
        if raw.size != int(np.prod(dims)):
            raise CheckpointFormatError(f"block {name!r}: {raw.size} values on disk, expected {int(np.prod(dims))}")
        values[name] = raw.reshape(dims).astype(np.float64)
    missing = set(expected) - set(values)
    if missing:
        raise CheckpointFormatError(f"checkpoint lacks blocks {sorted(missing)}")
    network.load_values(values)
    return network, config, int(info.get("timestep", 0))
