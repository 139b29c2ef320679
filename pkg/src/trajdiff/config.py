"""Run configuration: one JSON document, dotted ``key=value`` overrides, strict keys."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field

from .denoiser import DenoiserConfig, OptimizerConfig
from .diffusion import TIME_MAPPINGS
from .errors import ConfigError
from .evaluate import COLLISION_MODES, L2_MODES
from .scene import GridConfig, ScenarioConfig


@dataclass(frozen=True)
class NoiseConfig:
    """Mock-proposer noise, in meters."""

    mean_x: float = 0.0
    mean_y: float = 0.0
    std_x: float = 0.5
    std_y: float = 0.5

    def validate(self) -> None:
        if self.std_x < 0 or self.std_y < 0:
            raise ConfigError("noise.std_x and noise.std_y must be >= 0")


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    K: int = 10
    t_start: float = 0.0
    t_end: float = 3.0
    time_mapping: str = "matched"
    draws_per_scenario: int = 8

    def validate(self) -> None:
        if self.T < 1 or not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError("diffusion needs T >= 1 and 0 < beta_start <= beta_end < 1")
        if self.K < 0 or (self.K > 0 and not self.t_end > self.t_start):
            raise ConfigError("diffusion needs K >= 0 and t_end > t_start")
        if self.time_mapping not in TIME_MAPPINGS:
            raise ConfigError(f"diffusion.time_mapping must be one of {TIME_MAPPINGS}, got {self.time_mapping!r}")
        if self.draws_per_scenario < 1:
            raise ConfigError("diffusion.draws_per_scenario must be >= 1")


@dataclass(frozen=True)
class StatsConfig:
    alpha: float = 0.05
    pool: int = 1

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"stats.alpha must be in [0, 1], got {self.alpha}")
        if self.pool < 1:
            raise ConfigError("stats.pool must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    l2_mode: str = "avg"
    collision_mode: str = "scenario"
    horizons: tuple[float, float, float] = (1.0, 2.0, 3.0)
    count: int = 500
    svg_limit: int = 20

    def validate(self) -> None:
        if self.l2_mode not in L2_MODES:
            raise ConfigError(f"eval.l2_mode must be one of {L2_MODES}, got {self.l2_mode!r}")
        if self.collision_mode not in COLLISION_MODES:
            raise ConfigError(f"eval.collision_mode must be one of {COLLISION_MODES}, got {self.collision_mode!r}")
        if self.count < 0 or self.svg_limit < 0:
            raise ConfigError("eval.count and eval.svg_limit must be >= 0")


@dataclass(frozen=True)
class AblationConfig:
    rows: tuple[str, ...] = ("all", "no-TSE")
    seeds: tuple[int, ...] = (0, 1, 2)

    def validate(self) -> None:
        if not self.rows or not self.seeds:
            raise ConfigError("ablation.rows and ablation.seeds must be non-empty")


@dataclass(frozen=True)
class SeedConfig:
    """Stage seeds. The global ``--seed`` flag replaces ``base``; other seeds are offsets from it."""

    base: int = 0
    scenarios: int = 1
    eval_scenarios: int = 2
    proposals: int = 11
    eval_proposals: int = 12
    table: int = 7
    noising: int = 3
    init: int = 0
    shuffle: int = 5

    def resolve(self, name: str) -> int:
        return (int(self.base) + int(getattr(self, name))) % 2**64


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    stats: StatsConfig = field(default_factory=StatsConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(
        steps=6000, batch_size=64, lr_schedule="cosine", log_every=50))
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)

    def validate(self) -> RunConfig:
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            if hasattr(section, "validate"):
                section.validate()
        if self.denoiser.bev_channels != self.grid.channels:
            raise ConfigError(f"denoiser.bev_channels ({self.denoiser.bev_channels}) must equal "
                              f"grid.channels ({self.grid.channels})")
        if self.denoiser.horizon != self.scenario.horizon:
            raise ConfigError(f"denoiser.horizon ({self.denoiser.horizon}) must equal "
                              f"scenario.horizon ({self.scenario.horizon})")
        return self

    def to_dict(self) -> dict:
        return _to_plain(self)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(value, hint, key: str):
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"config key '{key}' must be an object")
        return _build(hint, value, key + ".")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key '{key}' must be a list")
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], key) for v in value)
        if len(value) != len(args):
            raise ConfigError(f"config key '{key}' needs {len(args)} values, got {len(value)}")
        return tuple(_coerce(v, a, key) for v, a in zip(value, args))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{key}' must be true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key '{key}' must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{key}' must be a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"config key '{key}' must be a string, got {value!r}")
        return value
    return value


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
    kwargs = {k: _coerce(v, hints[k], prefix + k) for k, v in data.items()}
    return cls(**kwargs)


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def parse_override(text: str) -> dict:
    """``a.b.c=value`` to a nested dict; the value is JSON when it parses, else a plain string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"override {text!r} has an empty key segment")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def load_config(path=None, overrides: typing.Sequence[str] = (), seed: int | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    for text in overrides:
        data = _merge(data, parse_override(text))
    if seed is not None:
        data = _merge(data, {"seeds": {"base": int(seed)}})
    try:
        cfg = _build(RunConfig, data)
    except TypeError as exc:
        raise ConfigError(f"bad config: {exc}") from None
    return cfg.validate()
