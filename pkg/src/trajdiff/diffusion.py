"""Forward noising with proposal-fitted noise, path standardization, and the
exponential-sigma reverse update used to denoise a proposal.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigError, FittingError
from .scene import BevGrid, Path
from .stats import NoiseModel


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return self.beta.size


def make_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta ramp and the running product of ``1 - beta``."""
    if T < 1:
        raise ConfigError(f"schedule needs T >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alpha_bar = np.cumprod(1.0 - beta)
    beta.flags.writeable = False
    alpha_bar.flags.writeable = False
    return DiffusionSchedule(beta, alpha_bar)


def forward_noise(gt: Path, i: int, schedule: DiffusionSchedule, noise_model: NoiseModel,
                  seed: int) -> Path:
    """``sqrt(abar_i) * gt + sqrt(1 - abar_i) * eps`` with eps drawn from the noise model."""
    if not 0 <= i < schedule.T:
        raise ValueError(f"timestep {i} outside [0, {schedule.T})")
    if not noise_model.is_fitted:
        raise FittingError("forward noising needs a fitted noise model")
    eps = np.empty((gt.n, 2))
    if noise_model.std_x == 0 and noise_model.std_y == 0:
        eps[:] = noise_model.mean
    else:
        rng = np.random.default_rng(int(seed))
        eps[:, 0] = rng.normal(noise_model.mean_x, noise_model.std_x, gt.n)
        eps[:, 1] = rng.normal(noise_model.mean_y, noise_model.std_y, gt.n)
    ab = schedule.alpha_bar[i]
    return Path(math.sqrt(ab) * gt.waypoints + math.sqrt(1.0 - ab) * eps, gt.dt)


# --------------------------------------------------------------------------- standardization

@dataclass(frozen=True)
class Standardizer:
    mean_x: float
    mean_y: float
    std_x: float
    std_y: float

    def __post_init__(self):
        if not (self.std_x > 0 and self.std_y > 0):
            raise FittingError(f"standardizer needs positive spreads, got {self.std_x}, {self.std_y}")

    @property
    def mean(self) -> np.ndarray:
        return np.array([self.mean_x, self.mean_y])

    @property
    def std(self) -> np.ndarray:
        return np.array([self.std_x, self.std_y])

    def forward(self, xy: np.ndarray) -> np.ndarray:
        return (xy - self.mean) / self.std

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean_x": self.mean_x, "mean_y": self.mean_y, "std_x": self.std_x, "std_y": self.std_y}

    @classmethod
    def from_dict(cls, d: dict) -> Standardizer:
        return cls(float(d["mean_x"]), float(d["mean_y"]), float(d["std_x"]), float(d["std_y"]))

    @classmethod
    def identity(cls) -> Standardizer:
        return cls(0.0, 0.0, 1.0, 1.0)


def fit_standardizer(noised: Sequence[Path]) -> Standardizer:
    """Dataset-level per-coordinate mean and population standard deviation."""
    if len(noised) < 2:
        raise FittingError(f"standardizer needs at least 2 paths, got {len(noised)}")
    pts = np.concatenate([p.waypoints for p in noised])
    std = pts.std(axis=0)
    if not np.all(std > 0):
        raise FittingError("zero variance in a coordinate; cannot standardize")
    mean = pts.mean(axis=0)
    return Standardizer(float(mean[0]), float(mean[1]), float(std[0]), float(std[1]))


def standardize(p: Path, s: Standardizer) -> Path:
    return Path(s.forward(p.waypoints), p.dt)


def destandardize(p: Path, s: Standardizer) -> Path:
    return Path(s.inverse(p.waypoints), p.dt)


# --------------------------------------------------------------------------- reverse process

@dataclass(frozen=True, eq=False)
class ReverseTimeGrid:
    t_values: np.ndarray

    def __post_init__(self):
        t = np.array(self.t_values, dtype=np.float64).ravel()
        if t.size < 1:
            raise ConfigError("reverse grid needs at least one time value")
        if np.any(np.diff(t) <= 0):
            raise ConfigError("reverse grid times must be strictly increasing")
        t.flags.writeable = False
        object.__setattr__(self, "t_values", t)

    @property
    def K(self) -> int:
        return self.t_values.size - 1

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(-self.t_values)

    @property
    def total_time(self) -> float:
        return float(self.t_values[-1] - self.t_values[0])


def make_reverse_grid(K: int = 10, t_start: float = 0.0, t_end: float = 3.0) -> ReverseTimeGrid:
    if K < 0:
        raise ConfigError(f"reverse grid needs K >= 0, got {K}")
    if K == 0:
        return ReverseTimeGrid(np.array([t_start]))
    if not t_end > t_start:
        raise ConfigError(f"reverse grid needs t_end > t_start, got {t_start}, {t_end}")
    return ReverseTimeGrid(np.linspace(t_start, t_end, K + 1))


def reverse_weights(t_k: float, t_k1: float) -> tuple[float, float]:
    """Weights on (noisy, prediction): ``sigma(t_k1)/sigma(t_k) = e^-h`` and ``-(e^-h - 1)``."""
    h = t_k1 - t_k
    if not h > 0:
        raise ValueError(f"reverse step needs t_k1 > t_k, got {t_k} -> {t_k1}")
    keep = math.exp(-h)
    return keep, -math.expm1(-h)


def reverse_step_array(noisy: np.ndarray, prediction: np.ndarray, t_k: float, t_k1: float) -> np.ndarray:
    if noisy.shape != prediction.shape:
        raise ValueError(f"shape mismatch: {noisy.shape} vs {prediction.shape}")
    keep, move = reverse_weights(t_k, t_k1)
    return keep * noisy + move * prediction


def reverse_step(noisy: Path, prediction: Path, t_k: float, t_k1: float) -> Path:
    if noisy.n != prediction.n:
        raise ValueError(f"path length mismatch: {noisy.n} vs {prediction.n}")
    return Path(reverse_step_array(noisy.waypoints, prediction.waypoints, t_k, t_k1), noisy.dt)


class Denoiser(Protocol):
    """Anything that predicts a clean standardized path from a noisy one."""

    standardizer: Standardizer

    def __call__(self, noisy: Path, bev: BevGrid, context, t: float) -> Path: ...


def sample(denoiser: Denoiser, bev: BevGrid, context, start: Path, grid: ReverseTimeGrid) -> Path:
    """Run the reverse loop in standardized space from ``start``; return the path in meters."""
    current = start
    t = grid.t_values
    for k in range(grid.K):
        prediction = denoiser(current, bev, context, float(t[k]))
        current = reverse_step(current, prediction, float(t[k]), float(t[k + 1]))
    return destandardize(current, denoiser.standardizer)


def initial_state(proposal: Path, standardizer: Standardizer, start_scale: float = 1.0) -> Path:
    """Standardized starting point of the reverse loop for a raw proposal in meters."""
    return Path(standardizer.forward(start_scale * proposal.waypoints), proposal.dt)


TIME_MAPPINGS = ("matched", "noise", "direct")


def matched_start_index(schedule: DiffusionSchedule) -> int:
    """Timestep whose signal and noise weights are closest to equal (abar nearest 0.5).

    A raw proposal ``gt + eps`` scaled by ``sqrt(abar)`` there looks like a
    forward-noised sample from that step.
    """
    return int(np.argmin(np.abs(schedule.alpha_bar - 0.5)))


def start_scale(schedule: DiffusionSchedule, mapping: str = "matched") -> float:
    """Factor applied to a raw proposal before it enters the reverse loop."""
    if mapping == "direct":
        return 1.0
    if mapping in ("matched", "noise"):
        return math.sqrt(schedule.alpha_bar[matched_start_index(schedule)])
    raise ConfigError(f"unknown time mapping {mapping!r}; expected one of {TIME_MAPPINGS}")


def reverse_time_to_timestep(t: float, schedule: DiffusionSchedule, mapping: str = "matched") -> float:
    """Timestep value fed to the denoiser at reverse time ``t``.

    With start scale ``c`` and a perfect predictor, the reverse state after time
    ``t`` is ``(1 - e^-t (1 - c)) * gt + c e^-t * eps``.

    * ``matched``: the fractional step whose signal weight ``sqrt(abar)`` equals
      that gt coefficient. The gt part dominates path magnitude, so this keeps
      the model's implied rescaling right.
    * ``noise``: the fractional step whose noise weight ``sqrt(1 - abar)`` equals
      ``c e^-t``.
    * ``direct``: ``T * e^-t`` with an unscaled start.
    """
    steps = np.arange(schedule.T, dtype=np.float64)
    if mapping == "direct":
        return float(schedule.T * math.exp(-t))
    c = start_scale(schedule, mapping)
    if mapping == "matched":
        signal = np.sqrt(schedule.alpha_bar)
        target = 1.0 - math.exp(-t) * (1.0 - c)
        return float(np.interp(target, signal[::-1], steps[::-1]))
    noise = np.sqrt(1.0 - schedule.alpha_bar)
    return float(np.interp(math.exp(-t) * c, noise, steps))


# --------------------------------------------------------------------------- training examples

@dataclass(frozen=True)
class TrainingExample:
    bev: BevGrid
    context: object  # ContextEmbedding
    noised_path: Path
    timestep: int
    target: Path
    scenario_id: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.noised_path.n != self.target.n:
            raise ValueError("noised path and target lengths differ")


def example_seed(base_seed: int, scenario_seed: int, draw: int) -> int:
    words = np.random.SeedSequence([int(base_seed), int(scenario_seed), int(draw)]).generate_state(1, np.uint64)
    return int(words[0])


def draw_timestep(seed: int, T: int) -> int:
    return int(np.random.default_rng([int(seed), 1]).integers(T))


def write_example_refs(path, examples: Sequence[TrainingExample]) -> None:
    """Noised-dataset cache: only ``{scenario_id, timestep, seed}``; grids and contexts are re-derived."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({"scenario_id": ex.scenario_id, "timestep": ex.timestep, "seed": ex.seed},
                                separators=(",", ":")) + "\n")


def read_example_refs(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
