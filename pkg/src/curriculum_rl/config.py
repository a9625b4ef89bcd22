"""Run configuration: TOML file plus ``MATHBOOK_`` environment overrides.

An override names a key path with double underscores, e.g.
``MATHBOOK_RL__LR=1e-5`` or ``MATHBOOK_DATA__SFT=200``. Values are parsed as
TOML scalars, falling back to plain strings.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ENV_PREFIX = "MATHBOOK_"
BUILTIN_CONFIGS = ("default", "toy")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    hierarchy: str = ""  # empty: generated full-scale hierarchy
    corpus: str = ""     # empty: generated corpus sized by the counts below
    sft: int = 1000
    pre: int = 5800
    dyn: int = 4000
    eval_items: int = 100
    group_size: int = 3


@dataclass(frozen=True)
class PolicyConfig:
    hidden: int = 32
    embed: int = 8
    init_scale: float = 0.3


@dataclass(frozen=True)
class SftStageConfig:
    lr: float = 1e-5
    epochs: int = 1
    warmup_ratio: float = 0.1
    batch_size: int = 8
    optimizer: str = "adam"


@dataclass(frozen=True)
class RewardSection:
    correct: float = 0.9
    format: float = 0.1
    otherwise: float = 0.0
    mode: str = "piecewise"


@dataclass(frozen=True)
class RlConfig:
    lr: float = 1e-6
    temperature: float = 1.0
    group_size: int = 8
    max_len: int = 1024
    epsilon: float = 0.2
    beta: float = 0.04
    kl_estimator: str = "k3"
    optimizer: str = "sgd"
    aggregation: str = "rankwise"
    pre_steps: int = 0  # 0: one pass over the principle groups
    groups_per_step: int = 1
    eval_samples: int = 64
    log_rewards: bool = True
    reward: RewardSection = field(default_factory=RewardSection)


@dataclass(frozen=True)
class DynConfig:
    pass_threshold: float = 0.5
    max_reattempts: int = 2
    increment_steps: int = 20
    increment_mode: str = "grpo"
    max_increment_problems: int = 8
    node_steps: int = 0
    lattice_batch: int = 1


@dataclass(frozen=True)
class EvalConfig:
    mode: str = "rule"
    judge_url: str = ""
    prompt_template: str = ""  # path to a template file; empty uses the built-in one


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    sft: SftStageConfig = field(default_factory=SftStageConfig)
    rl: RlConfig = field(default_factory=RlConfig)
    dyn: DynConfig = field(default_factory=DynConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        positive = {"sft.lr": self.sft.lr, "rl.lr": self.rl.lr,
                    "rl.temperature": self.rl.temperature, "rl.group_size": self.rl.group_size,
                    "rl.max_len": self.rl.max_len, "sft.epochs": self.sft.epochs,
                    "sft.batch_size": self.sft.batch_size, "data.group_size": self.data.group_size,
                    "policy.hidden": self.policy.hidden}
        for name, v in positive.items():
            if not v > 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        for name in ("sft", "pre", "dyn", "eval_items"):
            if getattr(self.data, name) < 0:
                raise ConfigError(f"data.{name} must be >= 0")
        if not 0 <= self.sft.warmup_ratio <= 1:
            raise ConfigError("sft.warmup_ratio must be in [0,1]")
        if self.eval.mode not in ("rule", "external"):
            raise ConfigError(f"eval.mode must be rule or external, got {self.eval.mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return sha256_json(self.to_dict())


def sha256_json(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _build(cls, data: Mapping, where: str = ""):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(where + k for k in unknown)}")
    defaults = cls.__new__(cls)
    for f in fields(cls):
        object.__setattr__(defaults, f.name, f.default_factory() if callable(f.default_factory)
                           else f.default)
    kwargs = {}
    for name, value in data.items():
        default = getattr(defaults, name)
        if is_dataclass(default):
            if not isinstance(value, Mapping):
                raise ConfigError(f"{where}{name} must be a table")
            kwargs[name] = _build(type(default), value, f"{where}{name}.")
            continue
        kwargs[name] = _coerce(value, default, where + name)
    return cls(**kwargs)


def _coerce(value, default, name: str):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{name} must be a boolean")
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{name} must be an integer")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{name} must be a number")
    if not isinstance(value, str):
        raise ConfigError(f"{name} must be a string")
    return value


def _parse_scalar(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_env(data: dict, environ: Mapping[str, str] | None = None) -> dict:
    env = os.environ if environ is None else environ
    out = json.loads(json.dumps(data))
    for key in sorted(env):
        if not key.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in key[len(ENV_PREFIX):].split("__")]
        node = out
        for p in path[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key} descends into a scalar")
        node[path[-1]] = _parse_scalar(env[key])
    return out


def config_from_dict(data: Mapping, environ: Mapping[str, str] | None = None) -> RunConfig:
    return _build(RunConfig, apply_env(dict(data), environ))


def builtin_config_text(name: str) -> str:
    """Text of a config shipped with the package (``default`` or ``toy``)."""
    return resources.files(__package__).joinpath("data", f"{name}.toml").read_text(
        encoding="utf-8")


def load_config(path: str | Path | None, environ: Mapping[str, str] | None = None
                ) -> tuple[RunConfig, str]:
    """Parse a config file, a built-in config name, or ``None`` for all defaults.

    Returns the config and the raw text it was read from.
    """
    if path is None:
        text = ""
    elif not Path(path).exists() and str(path) in BUILTIN_CONFIGS:
        text = builtin_config_text(str(path))
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data, environ), text
