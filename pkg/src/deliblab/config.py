"""Run configuration: JSON files mapped onto dataclasses, fail-fast.

Unknown keys are errors so a typo cannot silently fall back to a default.
Every message names the offending field with its dotted path.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .errors import ConfigError, ContractError
from .tasks import TaskSpec
from .training import SamplingStrategy, Scheme


@dataclass
class ModelConfig:
    d: int = 32
    extras: bool = False
    context_in_state: bool = False

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError("model.d: must be >= 1")


@dataclass
class OptimConfig:
    lr: float = 0.05
    clip: float = 5.0
    epochs: int = 10
    pretrain_epochs: int = 5
    batch_size: int = 16

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("optimizer.lr: must be positive")
        if self.clip < 0:
            raise ConfigError("optimizer.clip: must be >= 0")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("optimizer.epochs: must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("optimizer.batch_size: must be >= 1")


@dataclass
class RegConfig:
    enabled: bool = False
    gamma: float = 1.0
    g: float = 0.2

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("regularizer.gamma: must be >= 0")
        if self.g <= 0:
            raise ConfigError("regularizer.g: must be positive")


@dataclass
class RunConfig:
    task: TaskSpec
    model: ModelConfig = field(default_factory=ModelConfig)
    scheme: Scheme = field(default_factory=lambda: Scheme("separate"))
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    regularizer: RegConfig = field(default_factory=RegConfig)
    intermediate_mode: str = "free_running"
    relaxation: str = "straight_through"
    seed: int = 0
    out_dir: str = "runs/run"
    t_max: int | None = None
    eval_cap: int = 200

    def __post_init__(self):
        if self.intermediate_mode not in ("free_running", "teacher_forced"):
            raise ConfigError(
                "intermediate_mode: expected free_running or teacher_forced")
        if self.relaxation not in ("straight_through", "relaxed"):
            raise ConfigError("relaxation: expected straight_through or relaxed")
        if self.scheme.kind == "joint_loss" and self.intermediate_mode == "teacher_forced":
            raise ConfigError(
                "intermediate_mode: the reparameterized scheme samples its own "
                "intermediates and only supports free_running")
        if self.t_max is None:
            self.t_max = self.task.L_max + 4
        if self.t_max < self.task.L_max + 1:
            raise ConfigError("t_max: smaller than the longest reference")
        if self.eval_cap < 1:
            raise ConfigError("eval_cap: must be >= 1")


@dataclass
class VerifyConfig:
    """Sizes for the enumeration-oracle verification suite."""
    V: int = 4
    t_max: int = 3
    d: int = 3
    L: int = 2
    trials: int = 10000
    M: int = 4
    seed: int = 0
    cap: int = 100000
    z_threshold: float = 4.0
    n_normalization: int = 20
    n_bound: int = 100

    def __post_init__(self):
        if self.V < 3:
            raise ConfigError("verify.V: must be >= 3")
        if self.trials < 100:
            raise ConfigError("verify.trials: must be >= 100")


_SECTIONS = {
    "model": ModelConfig,
    "optimizer": OptimConfig,
    "regularizer": RegConfig,
}


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name for f in cls.__dataclass_fields__.values()}
    for k in data:
        if k not in fields:
            raise ConfigError(f"{path}.{k}: unknown key")
    try:
        return cls(**data)
    except (ContractError, ConfigError) as e:
        raise ConfigError(f"{path}: {e}") from None
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from None


def _build_scheme(data: dict) -> Scheme:
    if not isinstance(data, dict):
        raise ConfigError("scheme: expected an object")
    data = dict(data)
    strat = data.pop("strategy", None)
    allowed = {"kind", "M", "tau"}
    for k in data:
        if k not in allowed:
            raise ConfigError(f"scheme.{k}: unknown key")
    try:
        strategy = (_build(SamplingStrategy, strat, "scheme.strategy")
                    if strat is not None else SamplingStrategy())
        return Scheme(strategy=strategy, **data)
    except ContractError as e:
        raise ConfigError(f"scheme: {e}") from None


def run_config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("top level: expected an object")
    known = {"task", "model", "scheme", "optimizer", "regularizer",
             "intermediate_mode", "relaxation", "seed", "out_dir", "t_max",
             "eval_cap"}
    for k in data:
        if k not in known:
            raise ConfigError(f"{k}: unknown key")
    if "task" not in data:
        raise ConfigError("task: required section missing")
    kwargs = {"task": _build(TaskSpec, data["task"], "task")}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build(cls, data[name], name)
    if "scheme" in data:
        kwargs["scheme"] = _build_scheme(data["scheme"])
    for scalar in ("intermediate_mode", "relaxation", "seed", "out_dir",
                   "t_max", "eval_cap"):
        if scalar in data:
            kwargs[scalar] = data[scalar]
    try:
        return RunConfig(**kwargs)
    except (ContractError, ConfigError) as e:
        raise ConfigError(str(e)) from None


def verify_config_from_dict(data: dict) -> VerifyConfig:
    return _build(VerifyConfig, data, "verify")


def load_run_config(path) -> RunConfig:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return run_config_from_dict(data)


def load_verify_config(path) -> VerifyConfig:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return verify_config_from_dict(data)


def run_config_to_dict(cfg: RunConfig) -> dict:
    out = asdict(cfg)
    return out
