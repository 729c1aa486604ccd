"""Run configuration: a flat ``key = value`` text format with dotted env params."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .model import ABLATIONS


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    env: str = "heterogeneous_jobs"
    env_args: dict[str, Any] = field(default_factory=dict)
    k: int = 4
    m: int = 64
    hidden_dim: int = 64
    encoder_hidden: int = 64
    mixing_embed: int = 32
    lambda_phi: float = 1e-3
    lambda_h: float = 1e-3
    total_timesteps: int = 200_000
    eval_interval: int = 10_000
    eval_episodes: int = 32
    seed: int = 0
    ablation: str = "none"
    temperature: float = 1.0
    target_update_interval: int = 200
    double_q: bool = False
    kl_stop_gradient_next: bool = False
    lr: float = 5e-4
    rms_alpha: float = 0.99
    rms_eps: float = 1e-5
    grad_clip: float = 10.0
    batch_size: int = 32
    buffer_size: int = 5000
    epsilon_start: float = 1.0
    epsilon_finish: float = 0.05
    epsilon_anneal_time: int = 50_000
    stop_at_normalized_return: float | None = None

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        for name in (
            "k", "m", "hidden_dim", "encoder_hidden", "mixing_embed", "total_timesteps",
            "eval_interval", "eval_episodes", "target_update_interval", "batch_size", "buffer_size",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lambda_phi < 0 or self.lambda_h < 0:
            raise ConfigError("lambda_phi and lambda_h must be non-negative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.lr <= 0 or not 0 <= self.rms_alpha < 1 or self.rms_eps <= 0 or self.grad_clip <= 0:
            raise ConfigError("optimizer settings out of range")
        if not 0 <= self.epsilon_finish <= self.epsilon_start <= 1:
            raise ConfigError("need 0 <= epsilon_finish <= epsilon_start <= 1")
        if self.epsilon_anneal_time < 0:
            raise ConfigError("epsilon_anneal_time must be non-negative")
        if self.batch_size > self.buffer_size:
            raise ConfigError("batch_size cannot exceed buffer_size")

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "env_args":
                for key in sorted(self.env_args):
                    lines.append(f"env.{key} = {_format(self.env_args[key])}")
                continue
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def as_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_text(cls, text: str, overrides: Iterable[str] = ()) -> RunConfig:
        pairs = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = line.split("=", 1)
            pairs.append((key.strip(), value.strip()))
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must look like key=value, got {item!r}")
            key, value = item.split("=", 1)
            pairs.append((key.strip(), value.strip()))
        return cls.from_pairs(pairs)

    @classmethod
    def from_file(cls, path: str | Path, overrides: Iterable[str] = ()) -> RunConfig:
        return cls.from_text(Path(path).read_text(), overrides)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> RunConfig:
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs: dict[str, Any] = {}
        env_args: dict[str, Any] = {}
        for key, value in pairs:
            if key.startswith("env."):
                env_args[key[4:]] = _parse_scalar(value)
            elif key in types and key != "env_args":
                kwargs[key] = _coerce(key, value, types[key])
            else:
                raise ConfigError(f"unknown config key {key!r}")
        kwargs["env_args"] = env_args
        return cls(**kwargs)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse_scalar(value: str):
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    if low == "none":
        return None
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def _coerce(key: str, value: str, type_name) -> Any:
    type_name = str(type_name)
    low = value.lower()
    try:
        if "None" in type_name and low == "none":
            return None
        if type_name.startswith("bool"):
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if type_name.startswith("int"):
            return int(float(value)) if float(value).is_integer() else int(value)
        if type_name.startswith("float"):
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {type_name}") from None
