"""Open-loop metrics (L2 at 1/2/3 s, collision rate), reports, and the ablation harness."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .geometry import OrientedBox, boxes_intersect  # noqa: F401  (re-exported)
from .scene import Path, Scenario, ego_boxes

HORIZONS = (1.0, 2.0, 3.0)
L2_MODES = ("avg", "point")
COLLISION_MODES = ("scenario", "waypoint")


@dataclass(frozen=True)
class EvalReport:
    l2_1s: float
    l2_2s: float
    l2_3s: float
    l2_avg: float
    coll_1s: float
    coll_2s: float
    coll_3s: float
    coll_avg: float
    scenario_count: int

    @classmethod
    def from_horizons(cls, l2: Sequence[float], coll: Sequence[float], count: int) -> EvalReport:
        return cls(*map(float, l2), float(np.mean(l2)), *map(float, coll), float(np.mean(coll)), int(count))

    def to_dict(self) -> dict:
        return asdict(self)


REPORT_HEADER = ["model", "L2 1s (m)", "L2 2s (m)", "L2 3s (m)", "L2 Avg. (m)",
                 "Collision 1s (%)", "Collision 2s (%)", "Collision 3s (%)", "Collision Avg. (%)", "scenarios"]


def horizon_index(path: Path, horizon_s: float) -> int:
    """Zero-based waypoint index at ``horizon_s`` seconds; it must lie on the waypoint grid."""
    k = horizon_s / path.dt - 1.0
    j = int(round(k))
    if abs(k - j) > 1e-9 or not 0 <= j < path.n:
        raise ConfigError(f"horizon {horizon_s}s is not on the waypoint grid (dt={path.dt}, n={path.n})")
    return j


def l2_at_horizons(pred: Path, gt: Path, horizons: Sequence[float] = HORIZONS,
                   mode: str = "avg") -> tuple[float, ...]:
    """Per-horizon L2 plus their mean.

    ``avg`` averages waypoint distances up to each horizon; ``point`` takes the
    distance at the horizon waypoint only.
    """
    if pred.n != gt.n:
        raise ValueError(f"path lengths differ: {pred.n} vs {gt.n}")
    if mode not in L2_MODES:
        raise ConfigError(f"l2 mode must be one of {L2_MODES}, got {mode!r}")
    dist = np.linalg.norm(pred.waypoints - gt.waypoints, axis=1)
    vals = []
    for h in horizons:
        j = horizon_index(gt, h)
        vals.append(float(dist[: j + 1].mean()) if mode == "avg" else float(dist[j]))
    return (*vals, float(np.mean(vals)))


def collision_flags(pred: Path, scenario: Scenario) -> np.ndarray:
    """Boolean per waypoint: does the ego box there hit any obstacle at that waypoint's time?"""
    flags = np.zeros(pred.n, dtype=bool)
    if not scenario.obstacles:
        return flags
    for j, (ego, t) in enumerate(zip(ego_boxes(pred, scenario.ego_dims), pred.times)):
        flags[j] = any(boxes_intersect(ego, track.at(float(t))) for track in scenario.obstacles)
    return flags


def path_collides(pred: Path, scenario: Scenario, horizon_s: float) -> bool:
    j = horizon_index(pred, horizon_s)
    return bool(collision_flags(pred, scenario)[: j + 1].any())


def collision_rate(preds: Sequence[Path] | Path, scenarios: Sequence[Scenario] | Scenario,
                   horizon_s: float, mode: str = "scenario") -> float:
    """Percent of scenarios with any collision up to the horizon (``scenario`` mode), or
    percent of colliding ego placements (``waypoint`` mode)."""
    if isinstance(preds, Path):
        preds, scenarios = [preds], [scenarios]
    if len(preds) != len(scenarios):
        raise ValueError(f"{len(preds)} paths vs {len(scenarios)} scenarios")
    if mode not in COLLISION_MODES:
        raise ConfigError(f"collision mode must be one of {COLLISION_MODES}, got {mode!r}")
    if not preds:
        return 0.0
    hits = total = 0
    for p, s in zip(preds, scenarios):
        f = collision_flags(p, s)[: horizon_index(p, horizon_s) + 1]
        if mode == "scenario":
            hits += bool(f.any())
            total += 1
        else:
            hits += int(f.sum())
            total += f.size
    return 100.0 * hits / total


def evaluate_paths(preds: Sequence[Path], scenarios: Sequence[Scenario], l2_mode: str = "avg",
                   collision_mode: str = "scenario", horizons: Sequence[float] = HORIZONS) -> EvalReport:
    if len(preds) != len(scenarios):
        raise ValueError(f"{len(preds)} paths vs {len(scenarios)} scenarios")
    if not preds:
        return EvalReport.from_horizons([0.0] * len(horizons), [0.0] * len(horizons), 0)
    l2 = np.array([l2_at_horizons(p, s.gt_path, horizons, l2_mode)[:-1] for p, s in zip(preds, scenarios)])
    flags = [collision_flags(p, s) for p, s in zip(preds, scenarios)]
    coll = []
    for h in horizons:
        j = horizon_index(preds[0], h)
        if collision_mode == "scenario":
            coll.append(100.0 * np.mean([f[: j + 1].any() for f in flags]))
        elif collision_mode == "waypoint":
            coll.append(100.0 * np.mean(np.concatenate([f[: j + 1] for f in flags])))
        else:
            raise ConfigError(f"collision mode must be one of {COLLISION_MODES}, got {collision_mode!r}")
    return EvalReport.from_horizons(l2.mean(axis=0), coll, len(preds))


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def report_rows(named: Sequence[tuple[str, EvalReport]]) -> list[list[str]]:
    return [[name, *(_fmt(v) for v in (r.l2_1s, r.l2_2s, r.l2_3s, r.l2_avg,
                                        r.coll_1s, r.coll_2s, r.coll_3s, r.coll_avg)), str(r.scenario_count)]
            for name, r in named]


def write_report_csv(path, named: Sequence[tuple[str, EvalReport]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        writer.writerows(report_rows(named))


# --------------------------------------------------------------------------- ablation

ABLATION_HEADER = ["TSE", "CAF", "CAP", "BFC", "Avg. L2", "Avg. Collision Rate"]
ABLATION_SEED_HEADER = ["TSE", "CAF", "CAP", "BFC", "seed", "Avg. L2", "Avg. Collision Rate"]
FLAG_NAMES = ("TSE", "CAF", "CAP", "BFC")


def parse_flag_row(text: str) -> dict[str, bool]:
    """``all``, ``none``, or ``no-X`` terms joined by ``+`` with X in TSE/CAF/CAP/BFC (any case)."""
    flags = {k: True for k in FLAG_NAMES}
    text = text.strip()
    if text.lower() == "all":
        return flags
    if text.lower() == "none":
        return {k: False for k in FLAG_NAMES}
    for part in text.split("+"):
        part = part.strip()
        name = part[3:].upper() if part.lower().startswith("no-") else ""
        if name not in flags:
            raise ConfigError(f"bad ablation row {text!r}: expected all, none or no-<TSE|CAF|CAP|BFC>")
        flags[name] = False
    return flags


def _flag_cells(flags: dict) -> list[str]:
    return ["1" if flags[k] else "0" for k in FLAG_NAMES]


@dataclass(frozen=True)
class AblationRow:
    flags: dict
    seed: int
    l2_avg: float
    coll_avg: float


@dataclass(frozen=True)
class AblationSummary:
    """Median over seeds for one flag combination."""

    flags: dict
    l2_avg: float
    coll_avg: float
    seeds: tuple[int, ...]


def ablation_run(rows: Sequence[dict[str, bool]], seeds: Sequence[int],
                 train_and_eval: Callable[[dict, int], EvalReport]) -> list[AblationRow]:
    """One trained-and-evaluated model per (flag row, seed); same data for every row.

    ``train_and_eval(flags, seed)`` owns the data and the training recipe so
    that rows differ only in their flags and seed.
    """
    out = []
    for flags in rows:
        for seed in seeds:
            rep = train_and_eval(dict(flags), int(seed))
            out.append(AblationRow(dict(flags), int(seed), rep.l2_avg, rep.coll_avg))
    return out


def ablation_medians(rows: Sequence[AblationRow]) -> list[AblationSummary]:
    """Median Avg. L2 and collision rate per distinct flag combination, in first-seen order."""
    groups: dict[tuple, list[AblationRow]] = {}
    for r in rows:
        groups.setdefault(tuple(r.flags[k] for k in FLAG_NAMES), []).append(r)
    return [AblationSummary(dict(zip(FLAG_NAMES, key)), float(np.median([r.l2_avg for r in g])),
                            float(np.median([r.coll_avg for r in g])), tuple(r.seed for r in g))
            for key, g in groups.items()]


def write_ablation_csv(path, summaries: Sequence[AblationSummary]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_HEADER)
        for s in summaries:
            writer.writerow([*_flag_cells(s.flags), _fmt(s.l2_avg), _fmt(s.coll_avg)])


def write_ablation_seed_csv(path, rows: Sequence[AblationRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_SEED_HEADER)
        for r in rows:
            writer.writerow([*_flag_cells(r.flags), str(r.seed), _fmt(r.l2_avg), _fmt(r.coll_avg)])


# --------------------------------------------------------------------------- overlays

def overlay_svg(scenario: Scenario, paths: dict[str, Path], size: int = 400, margin: float = 2.0) -> str:
    """Top-down SVG: obstacles at t=0 (grey), the ego box, and named paths.

    Forward (x) points up the page and left (y) points left.
    """
    colors = {"gt": "#2a9d2a", "proposal": "#d62728", "sampled": "#1f5fd6"}
    pts = [np.zeros((1, 2))] + [p.waypoints for p in paths.values()]
    pts += [t.box.corners() for t in scenario.obstacles]
    allp = np.vstack(pts)
    lo = allp.min(axis=0) - margin
    hi = allp.max(axis=0) + margin
    span = float(max(hi - lo))
    scale = size / span

    def xy(p):
        # page x from -y, page y from -x
        return (hi[1] - p[1]) * scale, (hi[0] - p[0]) * scale

    def poly(corners, fill, stroke):
        s = " ".join(f"{a:.2f},{b:.2f}" for a, b in map(xy, corners))
        return f'<polygon points="{s}" fill="{fill}" stroke="{stroke}" stroke-width="1"/>'

    out = io.StringIO()
    out.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
              f'viewBox="0 0 {size} {size}">\n')
    out.write(f'<rect width="{size}" height="{size}" fill="white"/>\n')
    for track in scenario.obstacles:
        out.write(poly(track.box.corners(), "#bbbbbb", "#555555") + "\n")
    ego = OrientedBox(0.0, 0.0, 0.0, *scenario.ego_dims)
    out.write(poly(ego.corners(), "none", "#000000") + "\n")
    for name, p in paths.items():
        color = colors.get(name, "#9467bd")
        wp = np.vstack([np.zeros((1, 2)), p.waypoints])
        s = " ".join(f"{a:.2f},{b:.2f}" for a, b in map(xy, wp))
        out.write(f'<polyline points="{s}" fill="none" stroke="{color}" stroke-width="2"><title>{name}</title>'
                  f'</polyline>\n')
        for a, b in map(xy, p.waypoints):
            out.write(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="2.5" fill="{color}"/>\n')
    out.write("</svg>\n")
    return out.getvalue()
