"""Run configuration: one JSON schema shared by all CLI stages."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .evaluation import EvalThresholds
from .features import DetectorConfig
from .geometry import PolarConfig
from .phantom import PullbackConfig
from .registration import OptimizerConfig

ALL_STAGES = ("phantom", "features", "register", "eval")
CASE_KINDS = ("identity", "recovery", "prealign")


@dataclass
class CaseGenConfig:
    """Randomization ranges for synthetic cases."""

    length_mm: float = 31.0
    amplitude_range: tuple = (1.4, 2.4)
    n_branches_range: tuple = (2, 3)
    n_calcs_range: tuple = (2, 3)
    noise_sigma: float = 0.01
    theta_bias_max: float = 0.5235987755982988  # 30 degrees
    t_z_span: float = 5.0
    jitter_mm: float = 0.5


@dataclass
class RunConfig:
    out_dir: str = "runs/out"
    seed: int | None = 0
    seeds: list | None = None
    stages: list = field(default_factory=lambda: list(ALL_STAGES))
    jobs: int = 1
    case_kind: str = "recovery"
    polar: PolarConfig = field(default_factory=PolarConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    pullback: PullbackConfig = field(default_factory=PullbackConfig)
    gen: CaseGenConfig = field(default_factory=CaseGenConfig)
    eval: EvalThresholds = field(default_factory=EvalThresholds)

    def validate(self) -> None:
        unknown = set(self.stages) - set(ALL_STAGES)
        if unknown:
            raise ConfigError(f"unknown stages {sorted(unknown)}")
        if self.case_kind not in CASE_KINDS:
            raise ConfigError(f"case_kind must be one of {CASE_KINDS}")
        if self.seed is None and self.seeds is None:
            raise ConfigError("a seed is mandatory for stochastic stages")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        try:
            self.detector.validate()
            self.optimizer.validate()
            self.pullback.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def case_seeds(self) -> list:
        return list(self.seeds) if self.seeds else [int(self.seed)]


_TUPLE_FIELDS = {"near_band", "scale_bounds", "amplitude_range",
                 "n_branches_range", "n_calcs_range"}


def _to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_dict(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_dict(x) for x in obj]
    return obj


def _from_dict(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if dataclasses.is_dataclass(f.type) or f.name in ("polar", "detector", "optimizer", "pullback", "gen", "eval"):
            sub_cls = {"polar": PolarConfig, "detector": DetectorConfig,
                       "optimizer": OptimizerConfig, "pullback": PullbackConfig,
                       "gen": CaseGenConfig, "eval": EvalThresholds}[f.name]
            value = _from_dict(sub_cls, value)
        elif f.name in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def config_to_dict(cfg: RunConfig) -> dict:
    return _to_dict(cfg)


def config_from_dict(data: dict) -> RunConfig:
    cfg = _from_dict(RunConfig, data)
    cfg.validate()
    return cfg


def save_config(path, cfg: RunConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")


def load_config(path) -> RunConfig:
    return config_from_dict(json.loads(Path(path).read_text()))
