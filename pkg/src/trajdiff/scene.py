"""Synthetic driving scenarios, ground-truth paths, and BEV occupancy grids.

Everything is expressed in the ego frame at t=0: x forward, y left, meters.
Scenario generation is a pure function of ``(seed, config)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ScenarioGenerationError
from .geometry import OrientedBox, boxes_intersect

DEFAULT_HORIZON = 6
DEFAULT_DT = 0.5


@dataclass(frozen=True, eq=False)
class Path:
    """Waypoints ``(n, 2)`` spaced ``dt`` seconds apart, starting one step after t=0."""

    waypoints: np.ndarray
    dt: float = DEFAULT_DT

    def __post_init__(self):
        wp = np.array(self.waypoints, dtype=np.float64).reshape(-1, 2)
        if wp.shape[0] < 1:
            raise ValueError("a path needs at least one waypoint")
        if not np.all(np.isfinite(wp)):
            raise ValueError("path waypoints must be finite")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt}")
        wp.flags.writeable = False
        object.__setattr__(self, "waypoints", wp)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def n(self) -> int:
        return self.waypoints.shape[0]

    @property
    def x(self) -> np.ndarray:
        return self.waypoints[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.waypoints[:, 1]

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(1, self.n + 1)

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other):
        if not isinstance(other, Path):
            return NotImplemented
        return self.dt == other.dt and np.array_equal(self.waypoints, other.waypoints)

    def __repr__(self):
        return f"Path(n={self.n}, dt={self.dt}, waypoints={self.waypoints.tolist()})"

    def to_dict(self) -> dict:
        return {"dt": self.dt, "waypoints": self.waypoints.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> Path:
        return cls(np.asarray(d["waypoints"], dtype=np.float64), float(d["dt"]))


@dataclass(frozen=True)
class ObstacleTrack:
    box: OrientedBox
    vx: float = 0.0
    vy: float = 0.0
    yaw_rate: float = 0.0

    def at(self, t: float) -> OrientedBox:
        """Constant-velocity, constant-yaw-rate rollout of the t=0 box."""
        return self.box.moved(self.vx * t, self.vy * t, self.yaw_rate * t)

    def to_dict(self) -> dict:
        b = self.box
        return {"cx": b.cx, "cy": b.cy, "heading": b.heading, "length": b.length,
                "width": b.width, "vx": self.vx, "vy": self.vy, "yaw_rate": self.yaw_rate}

    @classmethod
    def from_dict(cls, d: dict) -> ObstacleTrack:
        box = OrientedBox(float(d["cx"]), float(d["cy"]), float(d["heading"]),
                          float(d["length"]), float(d["width"]))
        return cls(box, float(d["vx"]), float(d["vy"]), float(d["yaw_rate"]))


@dataclass(frozen=True)
class Scenario:
    id: str
    seed: int
    ego_dims: tuple[float, float]
    obstacles: tuple[ObstacleTrack, ...]
    extent: float
    gt_path: Path

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "seed": self.seed,
            "ego_dims": list(self.ego_dims),
            "extent": self.extent,
            "obstacles": [o.to_dict() for o in self.obstacles],
            "gt_path": self.gt_path.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Scenario:
        return cls(
            id=str(d["id"]),
            seed=int(d["seed"]),
            ego_dims=(float(d["ego_dims"][0]), float(d["ego_dims"][1])),
            obstacles=tuple(ObstacleTrack.from_dict(o) for o in d["obstacles"]),
            extent=float(d["extent"]),
            gt_path=Path.from_dict(d["gt_path"]),
        )


@dataclass(frozen=True)
class ScenarioConfig:
    extent: float = 20.0
    horizon: int = DEFAULT_HORIZON
    dt: float = DEFAULT_DT
    ego_dims: tuple[float, float] = (4.5, 1.9)
    obstacle_count: tuple[int, int] = (0, 6)
    speed: tuple[float, float] = (0.5, 5.0)
    accel: tuple[float, float] = (-1.0, 1.0)
    curvature: tuple[float, float] = (-0.08, 0.08)
    straight_prob: float = 0.3
    obstacle_speed: tuple[float, float] = (0.0, 4.0)
    obstacle_length: tuple[float, float] = (3.5, 5.0)
    obstacle_width: tuple[float, float] = (1.6, 2.2)
    yaw_rate: tuple[float, float] = (-0.15, 0.15)
    # share of obstacles spawned in lanes adjacent to the ego route
    near_path_fraction: float = 0.6
    lateral_offset: tuple[float, float] = (2.2, 4.5)
    clearance: float = 0.3
    max_retries: int = 200

    def validate(self) -> None:
        if not self.extent > 0:
            raise ConfigError(f"scenario.extent must be positive, got {self.extent}")
        if self.horizon < 1 or not self.dt > 0:
            raise ConfigError("scenario.horizon must be >= 1 and scenario.dt > 0")
        lo, hi = self.obstacle_count
        if lo < 0 or hi < lo:
            raise ConfigError(f"scenario.obstacle_count must be 0 <= lo <= hi, got {self.obstacle_count}")
        for name in ("speed", "obstacle_speed"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"scenario.{name} must be 0 <= lo <= hi, got {(lo, hi)}")
        for name in ("accel", "curvature", "yaw_rate", "obstacle_length", "obstacle_width", "lateral_offset"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ConfigError(f"scenario.{name} range is inverted: {(lo, hi)}")
        if self.obstacle_length[0] <= 0 or self.obstacle_width[0] <= 0:
            raise ConfigError("scenario obstacle dimensions must be positive")
        if min(self.ego_dims) <= 0:
            raise ConfigError(f"scenario.ego_dims must be positive, got {self.ego_dims}")
        if self.max_retries < 1:
            raise ConfigError("scenario.max_retries must be >= 1")


@dataclass(frozen=True)
class GridConfig:
    channels: int = 6
    height: int = 64
    width: int = 64
    resolution: float = 0.5
    supersample: int = 10
    lane_half_width: float = 4.0

    def validate(self) -> None:
        if self.channels < 3:
            raise ConfigError(f"grid.channels must be >= 3, got {self.channels}")
        if self.height <= 0 or self.width <= 0 or self.height % 2 or self.width % 2:
            raise ConfigError(f"grid.height/width must be positive and even, got {self.height}x{self.width}")
        if not self.resolution > 0:
            raise ConfigError(f"grid.resolution must be positive, got {self.resolution}")
        if self.supersample < 1:
            raise ConfigError("grid.supersample must be >= 1")


@dataclass(frozen=True, eq=False)
class BevGrid:
    """Ego-centred ``C x H x W`` grid. Row index grows with x (forward), column with y (left)."""

    data: np.ndarray
    resolution: float

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"BEV data must be C x H x W, got shape {data.shape}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        if not isinstance(other, BevGrid):
            return NotImplemented
        return self.resolution == other.resolution and np.array_equal(self.data, other.data)


# --------------------------------------------------------------------------- kinematics

def _advance(x: float, y: float, heading: float, arc: float, curvature: float):
    """Exact pose after travelling ``arc`` meters on a circle of the given curvature."""
    half = 0.5 * curvature * arc
    chord = arc * np.sinc(half / math.pi)  # 2 sin(half) / curvature, stable at curvature 0
    mid = heading + half
    return x + chord * math.cos(mid), y + chord * math.sin(mid), heading + curvature * arc


def _interval_arc(speed: float, accel: float, dt: float) -> tuple[float, float]:
    """Distance covered in one interval and the speed at its end; speed never goes negative."""
    end = speed + accel * dt
    if end >= 0.0:
        return speed * dt + 0.5 * accel * dt * dt, end
    stop = speed / -accel
    return 0.5 * speed * stop, 0.0


def rollout(speed: float, accel: float, curvatures: Sequence[float], dt: float) -> Path:
    """Unicycle rollout with per-interval curvature; one waypoint per entry of ``curvatures``."""
    x = y = heading = 0.0
    v = float(speed)
    pts = []
    for kappa in curvatures:
        arc, v = _interval_arc(v, accel, dt)
        x, y, heading = _advance(x, y, heading, arc, float(kappa))
        pts.append((x, y))
    return Path(np.array(pts), dt)


def ground_truth_path(ego_speed: float, curvature: float, n: int = DEFAULT_HORIZON,
                      dt: float = DEFAULT_DT) -> Path:
    if n < 1 or not dt > 0 or ego_speed < 0:
        raise ValueError(f"need n >= 1, dt > 0, speed >= 0; got n={n}, dt={dt}, speed={ego_speed}")
    return rollout(ego_speed, 0.0, [curvature] * n, dt)


def path_headings(path: Path) -> np.ndarray:
    """Heading at each waypoint: direction to the next one; the last reuses the previous."""
    wp = path.waypoints
    n = path.n
    headings = np.zeros(n)
    for j in range(n - 1):
        d = wp[j + 1] - wp[j]
        headings[j] = math.atan2(d[1], d[0]) if (d[0] != 0.0 or d[1] != 0.0) else 0.0
    if n > 1:
        headings[-1] = headings[-2]
    return headings


def ego_boxes(path: Path, ego_dims: tuple[float, float]) -> list[OrientedBox]:
    length, width = ego_dims
    return [OrientedBox(float(p[0]), float(p[1]), float(h), length, width)
            for p, h in zip(path.waypoints, path_headings(path))]


def ego_box_at_origin(ego_dims: tuple[float, float]) -> OrientedBox:
    return OrientedBox(0.0, 0.0, 0.0, ego_dims[0], ego_dims[1])


# --------------------------------------------------------------------------- generation

def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _sample_gt_path(rng: np.random.Generator, config: ScenarioConfig) -> Path:
    for _ in range(config.max_retries):
        speed = _uniform(rng, config.speed)
        accel = _uniform(rng, config.accel)
        if rng.random() < config.straight_prob:
            k1 = k2 = 0.0
        else:
            k1 = _uniform(rng, config.curvature)
            k2 = _uniform(rng, config.curvature)
        half = config.horizon // 2
        kappas = [k1] * half + [k2] * (config.horizon - half)
        path = rollout(speed, accel, kappas, config.dt)
        if np.all(np.abs(path.waypoints) <= config.extent):
            return path
    raise ScenarioGenerationError("could not sample a ground-truth path inside the world extent")


def _sample_obstacle(rng: np.random.Generator, config: ScenarioConfig, gt: Path) -> ObstacleTrack:
    length = _uniform(rng, config.obstacle_length)
    width = _uniform(rng, config.obstacle_width)
    speed = _uniform(rng, config.obstacle_speed)
    yaw_rate = _uniform(rng, config.yaw_rate)
    if rng.random() < config.near_path_fraction:
        # adjacent-lane traffic: sits beside waypoint j at that waypoint's time
        j = int(rng.integers(gt.n))
        heading_j = path_headings(gt)[j]
        side = 1.0 if rng.random() < 0.5 else -1.0
        offset = side * _uniform(rng, config.lateral_offset)
        along = float(rng.uniform(-3.0, 3.0))
        px = gt.x[j] + along * math.cos(heading_j) - offset * math.sin(heading_j)
        py = gt.y[j] + along * math.sin(heading_j) + offset * math.cos(heading_j)
        heading = heading_j + float(rng.uniform(-0.2, 0.2))
        if rng.random() < 0.3:
            heading += math.pi
        vx, vy = speed * math.cos(heading), speed * math.sin(heading)
        t_j = gt.times[j]
        heading0 = heading - yaw_rate * t_j
        cx, cy = px - vx * t_j, py - vy * t_j
    else:
        cx = float(rng.uniform(-config.extent, config.extent))
        cy = float(rng.uniform(-config.extent, config.extent))
        heading0 = float(rng.uniform(-math.pi, math.pi))
        vx, vy = speed * math.cos(heading0), speed * math.sin(heading0)
    return ObstacleTrack(OrientedBox(cx, cy, heading0, length, width), vx, vy, yaw_rate)


def _obstacle_ok(track: ObstacleTrack, config: ScenarioConfig, gt: Path,
                 gt_boxes: list[OrientedBox], placed: list[ObstacleTrack]) -> bool:
    box = track.box
    if abs(box.cx) > config.extent or abs(box.cy) > config.extent:
        return False
    margin = config.clearance
    if boxes_intersect(box.inflated(margin), ego_box_at_origin(config.ego_dims)):
        return False
    for t, ego in zip(gt.times, gt_boxes):
        if boxes_intersect(track.at(t).inflated(margin), ego):
            return False
    return not any(boxes_intersect(box, other.box) for other in placed)


def generate_scenario(seed: int, config: ScenarioConfig | None = None) -> Scenario:
    """Build one scenario deterministically from ``seed``.

    The ground-truth path is a two-piece constant-curvature unicycle rollout.
    Obstacles are rejection-sampled so none overlaps the ego box at t=0 or the
    ego boxes placed along the ground truth at the matching times.
    """
    config = config or ScenarioConfig()
    config.validate()
    seed = int(seed)
    rng = np.random.default_rng(seed)
    gt = _sample_gt_path(rng, config)
    gt_boxes = ego_boxes(gt, config.ego_dims)
    lo, hi = config.obstacle_count
    count = int(rng.integers(lo, hi + 1))
    obstacles: list[ObstacleTrack] = []
    for k in range(count):
        for _ in range(config.max_retries):
            track = _sample_obstacle(rng, config, gt)
            if _obstacle_ok(track, config, gt, gt_boxes, obstacles):
                obstacles.append(track)
                break
        else:
            raise ScenarioGenerationError(
                f"seed {seed}: failed to place obstacle {k + 1}/{count} after {config.max_retries} tries"
            )
    return Scenario(
        id=f"scn-{seed:020d}",
        seed=seed,
        ego_dims=tuple(float(v) for v in config.ego_dims),
        obstacles=tuple(obstacles),
        extent=float(config.extent),
        gt_path=gt,
    )


def scenario_seeds(base_seed: int, count: int) -> list[int]:
    """Independent 64-bit seeds for a dataset, stable under any chunking of the work."""
    if count <= 0:
        return []
    words = np.random.SeedSequence(int(base_seed)).generate_state(count, np.uint64)
    return [int(w) for w in words]


def generate_dataset(base_seed: int, count: int, config: ScenarioConfig | None = None) -> list[Scenario]:
    return [generate_scenario(s, config) for s in scenario_seeds(base_seed, count)]


# --------------------------------------------------------------------------- rasterization

def cell_bounds(index: np.ndarray | int, cells: int, resolution: float):
    """Lower edge (meters) of cells along one axis of an ego-centred grid."""
    return (np.asarray(index) - cells // 2) * resolution


def _box_occupancy(box: OrientedBox, height: int, width: int, resolution: float,
                   supersample: int, out: np.ndarray) -> None:
    corners = box.corners()
    r0 = max(int(math.floor(corners[:, 0].min() / resolution)) + height // 2, 0)
    r1 = min(int(math.floor(corners[:, 0].max() / resolution)) + height // 2, height - 1)
    c0 = max(int(math.floor(corners[:, 1].min() / resolution)) + width // 2, 0)
    c1 = min(int(math.floor(corners[:, 1].max() / resolution)) + width // 2, width - 1)
    if r0 > r1 or c0 > c1:
        return
    offsets = (np.arange(supersample) + 0.5) / supersample
    xs = (cell_bounds(np.arange(r0, r1 + 1), height, resolution)[:, None] + offsets * resolution).ravel()
    ys = (cell_bounds(np.arange(c0, c1 + 1), width, resolution)[:, None] + offsets * resolution).ravel()
    pts = np.stack(np.broadcast_arrays(xs[:, None], ys[None, :]), axis=-1)
    local = box.to_local(pts)
    inside = (np.abs(local[..., 0]) <= 0.5 * box.length) & (np.abs(local[..., 1]) <= 0.5 * box.width)
    hit = inside.reshape(r1 - r0 + 1, supersample, c1 - c0 + 1, supersample).any(axis=(1, 3))
    out[r0:r1 + 1, c0:c1 + 1] = np.maximum(out[r0:r1 + 1, c0:c1 + 1], hit)


def _distance_to_polyline(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    a, b = poly[:-1], poly[1:]
    ab = b - a
    denom = np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-18)
    ap = points[:, None, :] - a[None]
    t = np.clip(np.einsum("pij,ij->pi", ap, ab) / denom, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1).min(axis=1)


def _route(path: Path, reach: float) -> np.ndarray:
    """Centre line of the drivable corridor: straight behind the ego, then the path, then extended."""
    pts = [np.array([-reach, 0.0]), np.zeros(2), *path.waypoints]
    heading = path_headings(path)[-1] if path.n > 1 else 0.0
    end = path.waypoints[-1]
    pts.append(end + reach * np.array([math.cos(heading), math.sin(heading)]))
    return np.array(pts)


def rasterize_bev(scenario: Scenario, grid_config: GridConfig | None = None) -> BevGrid:
    """Rasterize a scenario into channels ``[occupancy t=0, drivable, ego, occupancy at future steps...]``.

    A cell is occupied when any of its ``supersample**2`` interior sample points lies in a box
    (closed box). Future channels sample the obstacle rollout evenly over the path horizon.
    """
    gc = grid_config or GridConfig()
    gc.validate()
    H, W, res, ss = gc.height, gc.width, gc.resolution, gc.supersample
    length, width = scenario.ego_dims
    if 0.5 * length > 0.5 * H * res or 0.5 * width > 0.5 * W * res:
        raise ConfigError(f"grid {H}x{W} at {res} m/cell cannot contain the {length}x{width} m ego footprint")

    data = np.zeros((gc.channels, H, W))
    for track in scenario.obstacles:
        _box_occupancy(track.box, H, W, res, ss, data[0])

    xc = cell_bounds(np.arange(H), H, res) + 0.5 * res
    yc = cell_bounds(np.arange(W), W, res) + 0.5 * res
    centers = np.stack(np.meshgrid(xc, yc, indexing="ij"), axis=-1).reshape(-1, 2)
    reach = float(np.hypot(H, W) * res)
    dist = _distance_to_polyline(centers, _route(scenario.gt_path, reach))
    data[1] = (dist <= gc.lane_half_width).reshape(H, W)

    _box_occupancy(ego_box_at_origin(scenario.ego_dims), H, W, res, ss, data[2])

    n_future = gc.channels - 3
    horizon = scenario.gt_path.n * scenario.gt_path.dt
    for k in range(n_future):
        t = horizon * (k + 1) / n_future
        for track in scenario.obstacles:
            _box_occupancy(track.at(t), H, W, res, ss, data[3 + k])
    return BevGrid(data, res)


# --------------------------------------------------------------------------- JSON Lines I/O

def dumps_scenario(scenario: Scenario) -> str:
    return json.dumps(scenario.to_dict(), separators=(",", ":"))


def write_scenarios(path, scenarios: Iterable[Scenario]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenarios:
            fh.write(dumps_scenario(s) + "\n")


def read_scenarios(path) -> list[Scenario]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(Scenario.from_dict(json.loads(line)))
    return out
