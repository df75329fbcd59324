"""Run configuration: one YAML file with model/optimizer/data/eval sections.

Every field is validated up front against the preconditions of the module
that consumes it; error messages name the section and field.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .evaluation import ThresholdPolicy
from .model import ModelConfig
from .synth import SCENARIOS


def _from_dict(cls, section: str, raw: dict):
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{section}.{sorted(unknown)[0]}: unknown field")
    return cls(**raw)


@dataclass
class OptimizerConfig:
    learning_rate: float = 2e-3
    batch_size: int = 8
    epochs: int = 25
    max_steps: int | None = None
    seed: int = 0
    schedule: str = "constant"
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    checkpoint_interval: int = 0  # steps between checkpoints; 0 = final only
    val_interval: int = 0  # steps between validation passes; 0 = off

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"optimizer.learning_rate: must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"optimizer.batch_size: must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"optimizer.epochs: must be >= 0, got {self.epochs}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError(f"optimizer.max_steps: must be >= 0, got {self.max_steps}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"optimizer.schedule: unknown schedule {self.schedule!r}")
        if self.weight_decay < 0:
            raise ConfigError(f"optimizer.weight_decay: must be >= 0, got {self.weight_decay}")
        if self.grad_clip < 0:
            raise ConfigError(f"optimizer.grad_clip: must be >= 0, got {self.grad_clip}")


@dataclass
class DataConfig:
    suite_seed: int | None = None
    suite_counts: dict | None = None
    root: str | None = None  # directory previously written by `generate`
    fps: float = 4.0

    def __post_init__(self):
        if (self.suite_counts is None) == (self.root is None):
            raise ConfigError(
                "data.suite_counts: exactly one of suite_counts (in-memory synthetic "
                "suite) or root (written suite directory) is required")
        if self.suite_counts is not None:
            unknown = set(self.suite_counts) - set(SCENARIOS)
            if unknown:
                raise ConfigError(f"data.suite_counts: unknown scenario {sorted(unknown)[0]!r}")
            for key, val in self.suite_counts.items():
                if not isinstance(val, int) or val < 0:
                    raise ConfigError(
                        f"data.suite_counts: count for {key!r} must be a non-negative integer")
            if self.suite_seed is None:
                raise ConfigError("data.suite_seed: required with suite_counts")
        if self.fps <= 0:
            raise ConfigError(f"data.fps: must be > 0, got {self.fps}")


@dataclass
class EvalConfig:
    policy: str = "global_top_percent"
    percent: float = 10.0
    fixed_cut: float = 0.5
    scenarios: list | None = None  # None = report every populated cell

    def __post_init__(self):
        if self.policy not in ("global_top_percent", "frame_minmax_fixed"):
            raise ConfigError(f"eval.policy: unknown policy {self.policy!r}")
        if not 0.0 < self.percent < 100.0:
            raise ConfigError(f"eval.percent: must be in (0, 100), got {self.percent}")
        if self.scenarios is not None:
            valid = set(SCENARIOS) | {"total", "cross_event", "delta"}
            unknown = set(self.scenarios) - valid
            if unknown:
                raise ConfigError(f"eval.scenarios: unknown cell {sorted(unknown)[0]!r}")

    def threshold_policy(self) -> ThresholdPolicy:
        return ThresholdPolicy(kind=self.policy, percent=self.percent, fixed_cut=self.fixed_cut)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=lambda: DataConfig(suite_seed=0, suite_counts={"single": 8}))
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config: expected a mapping at the top level")
        unknown = set(raw) - {"model", "optimizer", "data", "eval"}
        if unknown:
            raise ConfigError(f"config: unknown section {sorted(unknown)[0]!r}")
        try:
            model = _from_dict(ModelConfig, "model", raw.get("model", {}))
            optim = _from_dict(OptimizerConfig, "optimizer", raw.get("optimizer", {}))
            data = _from_dict(DataConfig, "data", raw["data"]) if "data" in raw else None
            ev = _from_dict(EvalConfig, "eval", raw.get("eval", {}))
        except TypeError as exc:
            raise ConfigError(f"config: {exc}") from exc
        if data is None:
            data = DataConfig(suite_seed=0, suite_counts={"single": 8})
        return cls(model=model, optimizer=optim, data=data, eval=ev)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "RunConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config: file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config: cannot parse {path}: {exc}") from exc
        return cls.from_dict(raw or {})

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True),
                              encoding="utf-8")
