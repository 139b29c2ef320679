"""One-sample Kolmogorov-Smirnov normality checks on proposal residuals and
the Gaussian noise model fitted from them.

Residuals are ``proposal - ground truth`` per waypoint and coordinate. Each
coordinate is tested against a normal distribution whose mean and standard
deviation are estimated from the same residual sequence; the p-value is the
asymptotic Kolmogorov survival probability of ``sqrt(n) * D_n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .errors import AlignmentError, DegenerateDistributionError, DomainError, FittingError
from .scene import Path

DEFAULT_ALPHA = 0.05
SERIES_TOL = 1e-12
SERIES_MAX_TERMS = 200


@dataclass(frozen=True, eq=False)
class NoiseSamples:
    residual_x: np.ndarray
    residual_y: np.ndarray

    def __post_init__(self):
        rx = np.array(self.residual_x, dtype=np.float64).ravel()
        ry = np.array(self.residual_y, dtype=np.float64).ravel()
        if rx.shape != ry.shape:
            raise AlignmentError(f"residual lengths differ: {rx.size} vs {ry.size}")
        if not (np.all(np.isfinite(rx)) and np.all(np.isfinite(ry))):
            raise ValueError("residuals must be finite")
        rx.flags.writeable = False
        ry.flags.writeable = False
        object.__setattr__(self, "residual_x", rx)
        object.__setattr__(self, "residual_y", ry)

    def __len__(self) -> int:
        return self.residual_x.size


@dataclass(frozen=True)
class KsResult:
    d_n: float
    p_value: float
    n: int
    passed: bool


@dataclass(frozen=True)
class NoiseModel:
    """Independent Gaussian per coordinate. NaN parameters mark an unfitted model."""

    mean_x: float = math.nan
    mean_y: float = math.nan
    std_x: float = math.nan
    std_y: float = math.nan
    sample_count: int = 0

    @classmethod
    def gaussian(cls, std_x: float, std_y: float | None = None, mean_x: float = 0.0,
                 mean_y: float = 0.0) -> NoiseModel:
        """A specified (not fitted) model, e.g. for the mock proposer."""
        std_y = std_x if std_y is None else std_y
        if std_x < 0 or std_y < 0:
            raise ValueError("standard deviations must be non-negative")
        return cls(float(mean_x), float(mean_y), float(std_x), float(std_y), 0)

    @property
    def is_fitted(self) -> bool:
        return all(math.isfinite(v) for v in (self.mean_x, self.mean_y, self.std_x, self.std_y))

    @property
    def mean(self) -> np.ndarray:
        return np.array([self.mean_x, self.mean_y])

    @property
    def std(self) -> np.ndarray:
        return np.array([self.std_x, self.std_y])

    def to_dict(self) -> dict:
        return {"mean_x": self.mean_x, "mean_y": self.mean_y, "std_x": self.std_x,
                "std_y": self.std_y, "sample_count": self.sample_count}

    @classmethod
    def from_dict(cls, d: dict) -> NoiseModel:
        return cls(float(d["mean_x"]), float(d["mean_y"]), float(d["std_x"]), float(d["std_y"]),
                   int(d.get("sample_count", 0)))


@dataclass(frozen=True)
class NormalityReport:
    total_paths: int
    passed_paths: int
    pass_percentage: float
    results: tuple = ()  # per path: (KsResult x, KsResult y, passed) or None when degenerate


def extract_noise(proposals: Sequence[Path], ground_truths: Sequence[Path]) -> list[NoiseSamples]:
    if len(proposals) != len(ground_truths):
        raise AlignmentError(f"{len(proposals)} proposals vs {len(ground_truths)} ground truths")
    out = []
    for k, (p, g) in enumerate(zip(proposals, ground_truths)):
        if p.n != g.n:
            raise AlignmentError(f"pair {k}: proposal has {p.n} waypoints, ground truth {g.n}")
        r = p.waypoints - g.waypoints
        out.append(NoiseSamples(r[:, 0], r[:, 1]))
    return out


def pool_noise(noise: Sequence[NoiseSamples], k: int) -> list[NoiseSamples]:
    """Concatenate each run of ``k`` consecutive paths into one sample; a short tail is dropped."""
    if k < 1:
        raise ValueError(f"pool size must be >= 1, got {k}")
    if k == 1:
        return list(noise)
    out = []
    for start in range(0, len(noise) - k + 1, k):
        group = noise[start:start + k]
        out.append(NoiseSamples(np.concatenate([g.residual_x for g in group]),
                                np.concatenate([g.residual_y for g in group])))
    return out


def chunk_noise(noise: Sequence[NoiseSamples], size: int) -> list[NoiseSamples]:
    """Re-cut the concatenated residual stream into samples of exactly ``size`` values.

    Unlike ``pool_noise`` the unit need not be a multiple of the path length.
    The short tail is dropped.
    """
    if size < 1:
        raise ValueError(f"chunk size must be >= 1, got {size}")
    if len(noise) == 0:
        return []
    rx = np.concatenate([s.residual_x for s in noise])
    ry = np.concatenate([s.residual_y for s in noise])
    return [NoiseSamples(rx[i:i + size], ry[i:i + size]) for i in range(0, rx.size - size + 1, size)]


def edf(samples, x: float) -> float:
    a = np.asarray(samples, dtype=np.float64).ravel()
    if a.size == 0:
        raise DomainError("EDF of an empty sample")
    return float(np.count_nonzero(a <= x)) / a.size


def ks_statistic(samples, mean: float, std: float) -> float:
    """Exact sup-distance between the sample EDF and N(mean, std^2).

    The supremum is attained at a jump of the EDF, so only the right value
    ``i/n`` and the left limit ``(i-1)/n`` at each order statistic are checked.
    """
    a = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = a.size
    if n == 0:
        raise DomainError("KS statistic of an empty sample")
    if not std > 0:
        raise DegenerateDistributionError(f"reference standard deviation must be positive, got {std}")
    cdf = ndtr((a - mean) / std)
    i = np.arange(1, n + 1)
    return float(max(np.max(np.abs(i / n - cdf)), np.max(np.abs((i - 1) / n - cdf))))


def kolmogorov_sf(t: float) -> float:
    """Pr(K > t) for the Kolmogorov distribution, by its alternating series."""
    if not t > 0:
        raise DomainError(f"Kolmogorov survival function needs t > 0, got {t}")
    total = 0.0
    sign = 1.0
    for k in range(1, SERIES_MAX_TERMS + 1):
        term = math.exp(-2.0 * k * k * t * t)
        total += sign * term
        if term < SERIES_TOL:
            break
        sign = -sign
    return min(max(2.0 * total, 0.0), 1.0)


def _ks_one(residuals: np.ndarray, alpha: float, mean: float | None, std: float | None) -> KsResult:
    n = residuals.size
    if mean is None:
        mean = float(residuals.mean())
    if std is None:
        std = float(residuals.std(ddof=1)) if n > 1 else 0.0
    if not std > 0:
        raise DegenerateDistributionError("constant residuals have no spread to test")
    d = ks_statistic(residuals, mean, std)
    p = kolmogorov_sf(math.sqrt(n) * d) if d > 0 else 1.0
    return KsResult(d, p, n, p >= alpha)


def is_normal(path_noise: NoiseSamples, alpha: float = DEFAULT_ALPHA,
              reference: NoiseModel | None = None) -> tuple[KsResult, KsResult, bool]:
    """KS normality test on both coordinates; the path passes only if both do.

    By default the reference normal takes the mean and (n-1) standard deviation
    of each residual sequence. Passing ``reference`` tests against that model's
    parameters instead.
    """
    if reference is None:
        rx = _ks_one(path_noise.residual_x, alpha, None, None)
        ry = _ks_one(path_noise.residual_y, alpha, None, None)
    else:
        rx = _ks_one(path_noise.residual_x, alpha, reference.mean_x, reference.std_x)
        ry = _ks_one(path_noise.residual_y, alpha, reference.mean_y, reference.std_y)
    return rx, ry, rx.passed and ry.passed


def fit_noise_model(noise: Sequence[NoiseSamples]) -> NoiseModel:
    """Pooled mean and unbiased standard deviation per coordinate."""
    if len(noise) == 0:
        raise FittingError("no residuals to fit")
    rx = np.concatenate([s.residual_x for s in noise])
    ry = np.concatenate([s.residual_y for s in noise])
    if rx.size < 2:
        raise FittingError(f"need at least 2 residuals per coordinate, got {rx.size}")
    return NoiseModel(float(rx.mean()), float(ry.mean()), float(rx.std(ddof=1)), float(ry.std(ddof=1)),
                      int(rx.size))


def normality_report(noise: Sequence[NoiseSamples], alpha: float = DEFAULT_ALPHA,
                     reference: NoiseModel | None = None) -> NormalityReport:
    if len(noise) == 0:
        raise ValueError("normality report needs at least one path")
    results = []
    passed = 0
    for sample in noise:
        try:
            res = is_normal(sample, alpha, reference)
        except DegenerateDistributionError:
            res = None
        results.append(res)
        passed += bool(res and res[2])
    total = len(noise)
    return NormalityReport(total, passed, 100.0 * passed / total, tuple(results))


REPORT_COLUMNS = ("path_id", "n", "d_x", "p_x", "d_y", "p_y", "passed")


def report_rows(report: NormalityReport, path_ids: Sequence[str]) -> list[list]:
    """CSV rows for ``ks-verify``: one per path, then a summary row (total, passed, percentage)."""
    rows = []
    for pid, res in zip(path_ids, report.results):
        if res is None:
            rows.append([pid, "", "", "", "", "", 0])
        else:
            rx, ry, ok = res
            rows.append([pid, rx.n, repr(rx.d_n), repr(rx.p_value), repr(ry.d_n), repr(ry.p_value), int(ok)])
    return rows
