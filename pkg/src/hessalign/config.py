"""Experiment configuration: YAML in, validated dataclasses out.

Unknown keys are rejected everywhere so a misspelled hyperparameter fails
loudly instead of silently taking its default.
"""

from __future__ import annotations

import dataclasses
import subprocess
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import __version__
from .environments import EnvironmentSpec
from .evaluation import AttackConfig
from .objectives import PenaltyConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    """``kind`` is ``synthetic`` or ``cmnist`` (the latter needs IDX paths)."""

    kind: str = "synthetic"
    train: list[EnvironmentSpec] = field(default_factory=list)
    test: EnvironmentSpec | None = None
    images_path: str | None = None
    labels_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "cmnist"):
            raise ConfigError(f"data.kind must be 'synthetic' or 'cmnist', got {self.kind!r}")
        if len(self.train) < 2 or self.test is None:
            raise ConfigError("data needs at least 2 train environments and a test environment")
        if self.kind == "cmnist" and not (self.images_path and self.labels_path):
            raise ConfigError("data.images_path and data.labels_path are required for kind 'cmnist'")


@dataclass
class ModelConfig:
    layer_sizes: list[int] = field(default_factory=lambda: [4, 16, 16, 2])
    activation: str = "relu"


@dataclass
class AttackSweep:
    deltas: list[float] = field(default_factory=lambda: [0.01, 0.1, 1.0])
    ascent_lr: float = 0.1
    ascent_steps: int = 10
    rounds: int = 20

    def config(self, delta: float) -> AttackConfig:
        return AttackConfig(delta, self.ascent_lr, self.ascent_steps, self.rounds)


@dataclass
class FgsmSweep:
    epsilons: list[float] = field(default_factory=lambda: [0.0, 0.05, 0.1, 0.2])
    clip: str = "data"

    def __post_init__(self):
        if self.clip not in ("data", "none"):
            raise ConfigError(f"fgsm.clip must be 'data' or 'none', got {self.clip!r}")


@dataclass
class ExperimentConfig:
    name: str
    data: DataConfig
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    runs: int = 1
    seed_base: int = 0
    output_dir: str = "out"
    attack: AttackSweep = field(default_factory=AttackSweep)
    fgsm: FgsmSweep = field(default_factory=FgsmSweep)

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        # the penalty block is the single source of truth for the trainer
        self.train.penalty = self.penalty

    def seeds(self) -> list[int]:
        return [self.seed_base + k for k in range(self.runs)]

    def train_config(self, seed: int) -> TrainConfig:
        return dataclasses.replace(self.train, seed=seed, penalty=self.penalty)

    def to_dict(self) -> dict:
        d = _to_plain(self)
        d["train"].pop("penalty")
        d["train"].pop("seed")
        return d

    def identity(self) -> dict:
        """The resolved config as embedded in outputs (output location excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        return d


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, list):
        return [_to_plain(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# strict construction


def _build(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _build(inner, value, path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {type(value).__name__}")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp) if f.init}
        skip = {"penalty", "seed"} if tp is TrainConfig else set()
        unknown = sorted(set(value) - (names - skip))
        if unknown:
            raise ConfigError(f"{path}: unknown key(s) {unknown}")
        kwargs = {k: _build(hints[k], v, f"{path}.{k}" if path else k) for k, v in value.items()}
        try:
            return tp(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path or 'config'}: {exc}") from exc
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return [_build(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {tp}")


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be a mapping")
    return _build(ExperimentConfig, d, "")


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc.strerror or exc}") from exc
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: invalid YAML: {exc}") from exc
    try:
        return config_from_dict(d)
    except ConfigError as exc:
        raise ConfigError(f"{p}: {exc}") from exc


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def version_stamp() -> dict:
    """Package version plus the git commit of the source tree, when known."""
    commit = "unknown"
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5, check=False
        )
        if out.returncode == 0:
            commit = out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return {"package": "hessalign", "version": __version__, "git_commit": commit}
