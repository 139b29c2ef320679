"""Structured responses: the mock proposer, the response file format, and context tokens.

A response bundles detections, a driving advice label, and a proposed path. The
mock proposer perturbs the ground-truth path with Gaussian noise so the
proposal noise model is known exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    AlignmentError,
    MalformedResponseError,
    MissingFieldError,
    PathLengthError,
    UnknownAdviceError,
)
from .scene import DEFAULT_HORIZON, Path, Scenario
from .stats import NoiseModel

TURN_THRESHOLD = 0.15  # rad of net heading change
SPEED_CHANGE = 0.10  # relative change between initial and terminal speed
STOP_DISPLACEMENT = 0.5  # meters travelled over the whole horizon
STATIC_SPEED = 0.3  # m/s below which an obstacle is reported as parked


class Advice(str, Enum):
    ACCELERATE = "Accelerate"
    DECELERATE = "Decelerate"
    KEEP_SPEED = "KeepSpeed"
    TURN_LEFT = "TurnLeft"
    TURN_RIGHT = "TurnRight"
    STOP = "Stop"


@dataclass(frozen=True)
class Detection:
    label: str
    cx: float
    cy: float

    def __post_init__(self):
        if not self.label:
            raise ValueError("detection label must be non-empty")
        if not (math.isfinite(self.cx) and math.isfinite(self.cy)):
            raise ValueError("detection coordinates must be finite")


@dataclass(frozen=True)
class StructuredResponse:
    detections: tuple[Detection, ...]
    advice: Advice
    proposed_path: Path
    scenario_id: str = ""


@dataclass(frozen=True, eq=False)
class ContextEmbedding:
    tokens: np.ndarray

    def __post_init__(self):
        tok = np.array(self.tokens, dtype=np.float64)
        if tok.ndim != 2 or tok.shape[0] < 1:
            raise ValueError(f"context needs at least one token, got shape {tok.shape}")
        if not np.all(np.isfinite(tok)):
            raise ValueError("context tokens must be finite")
        tok.flags.writeable = False
        object.__setattr__(self, "tokens", tok)

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ContextEmbedding):
            return NotImplemented
        return np.array_equal(self.tokens, other.tokens)


# --------------------------------------------------------------------------- mock proposer

def derive_advice(path: Path) -> Advice:
    """Rule-based advice from the path's displacement, heading change, and speed change."""
    wp = np.vstack([np.zeros((1, 2)), path.waypoints])
    steps = np.diff(wp, axis=0)
    if np.linalg.norm(wp[-1]) < STOP_DISPLACEMENT:
        return Advice.STOP
    moving = steps[np.linalg.norm(steps, axis=1) > 1e-9]
    if len(moving) >= 2:
        first = math.atan2(moving[0, 1], moving[0, 0])
        last = math.atan2(moving[-1, 1], moving[-1, 0])
        turn = math.remainder(last - first, 2 * math.pi)
        if turn > TURN_THRESHOLD:
            return Advice.TURN_LEFT
        if turn < -TURN_THRESHOLD:
            return Advice.TURN_RIGHT
    v0 = np.linalg.norm(steps[0]) / path.dt
    v1 = np.linalg.norm(steps[-1]) / path.dt
    if v1 > v0 * (1 + SPEED_CHANGE):
        return Advice.ACCELERATE
    if v1 < v0 * (1 - SPEED_CHANGE):
        return Advice.DECELERATE
    return Advice.KEEP_SPEED


def detect(scenario: Scenario) -> tuple[Detection, ...]:
    out = []
    for track in scenario.obstacles:
        label = "parked_vehicle" if math.hypot(track.vx, track.vy) < STATIC_SPEED else "moving_vehicle"
        out.append(Detection(label, track.box.cx, track.box.cy))
    return tuple(out)


def propose(scenario: Scenario, noise_model: NoiseModel, seed: int) -> StructuredResponse:
    """Mock VLM response: true detections, rule-derived advice, noisy ground-truth path."""
    if noise_model.std_x < 0 or noise_model.std_y < 0:
        raise ValueError("noise model standard deviations must be non-negative")
    gt = scenario.gt_path
    rng = np.random.default_rng([int(seed), int(scenario.seed)])
    noise = np.empty((gt.n, 2))
    noise[:, 0] = rng.normal(noise_model.mean_x, noise_model.std_x, gt.n)
    noise[:, 1] = rng.normal(noise_model.mean_y, noise_model.std_y, gt.n)
    return StructuredResponse(
        detections=detect(scenario),
        advice=derive_advice(gt),
        proposed_path=Path(gt.waypoints + noise, gt.dt),
        scenario_id=scenario.id,
    )


# --------------------------------------------------------------------------- response files

def response_to_dict(response: StructuredResponse) -> dict:
    return {
        "scenario_id": response.scenario_id,
        "detections": [{"label": d.label, "x": d.cx, "y": d.cy} for d in response.detections],
        "advice": response.advice.value,
        "path": response.proposed_path.to_dict(),
    }


def serialize_response(response: StructuredResponse) -> str:
    return json.dumps(response_to_dict(response), separators=(",", ":"), ensure_ascii=False)


def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict):
        raise MalformedResponseError(f"{where or 'response'} must be a JSON object", where or None)
    if key not in obj:
        name = f"{where}.{key}" if where else key
        raise MissingFieldError(f"missing field '{name}'", name)
    return obj[key]


def _number(value, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise MalformedResponseError(f"field '{name}' must be a finite number, got {value!r}", name)
    return float(value)


def parse_response(text: str, horizon: int = DEFAULT_HORIZON) -> StructuredResponse:
    """Parse one JSON response. Every failure names the offending field."""
    try:
        obj = json.loads(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise MalformedResponseError(f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise MalformedResponseError("response must be a JSON object")

    raw_dets = _require(obj, "detections", "")
    if not isinstance(raw_dets, list):
        raise MalformedResponseError("field 'detections' must be a list", "detections")
    detections = []
    for i, d in enumerate(raw_dets):
        where = f"detections[{i}]"
        label = _require(d, "label", where)
        if not isinstance(label, str) or not label:
            raise MalformedResponseError(f"field '{where}.label' must be a non-empty string", f"{where}.label")
        detections.append(Detection(label, _number(_require(d, "x", where), f"{where}.x"),
                                    _number(_require(d, "y", where), f"{where}.y")))

    label = _require(obj, "advice", "")
    try:
        advice = Advice(label)
    except ValueError:
        raise UnknownAdviceError(f"unknown advice label {label!r}", "advice") from None

    raw_path = _require(obj, "path", "")
    dt = _number(_require(raw_path, "dt", "path"), "path.dt")
    if dt <= 0:
        raise MalformedResponseError("field 'path.dt' must be positive", "path.dt")
    pts = _require(raw_path, "waypoints", "path")
    if not isinstance(pts, list):
        raise MalformedResponseError("field 'path.waypoints' must be a list", "path.waypoints")
    if len(pts) != horizon:
        raise PathLengthError(f"field 'path.waypoints' has {len(pts)} waypoints, expected {horizon}",
                              "path.waypoints")
    coords = []
    for j, p in enumerate(pts):
        name = f"path.waypoints[{j}]"
        if not isinstance(p, list) or len(p) != 2:
            raise MalformedResponseError(f"field '{name}' must be an [x, y] pair", name)
        coords.append((_number(p[0], name), _number(p[1], name)))

    scenario_id = obj.get("scenario_id", "")
    if not isinstance(scenario_id, str):
        raise MalformedResponseError("field 'scenario_id' must be a string", "scenario_id")
    return StructuredResponse(tuple(detections), advice, Path(np.array(coords), dt), scenario_id)


def write_responses(path, responses: Iterable[StructuredResponse]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in responses:
            fh.write(serialize_response(r) + "\n")


def read_responses(path, horizon: int = DEFAULT_HORIZON) -> list[StructuredResponse]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(parse_response(line, horizon))
            except MalformedResponseError as exc:
                raise type(exc)(f"line {lineno}: {exc}", exc.field) from None
    return out


# --------------------------------------------------------------------------- context tokens

# Coordinates are divided by this before the linear position encoding.
POSITION_SCALE = 10.0


def _hashed_vector(key: str, table_seed: int, d_model: int) -> np.ndarray:
    digest = hashlib.blake2b(f"{int(table_seed)}:{key}".encode(), digest_size=16).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return rng.standard_normal(d_model) / math.sqrt(d_model)


@dataclass
class EmbeddingTable:
    """Seeded, read-only lookup from labels to vectors plus a fixed position encoder."""

    table_seed: int
    d_model: int
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.d_model <= 0:
            raise ValueError(f"d_model must be positive, got {self.d_model}")
        rng = np.random.default_rng([int(self.table_seed), 0x5EED])
        self.position_map = rng.standard_normal((self.d_model, 2)) / math.sqrt(2.0)

    def vector(self, key: str) -> np.ndarray:
        if key not in self._cache:
            self._cache[key] = _hashed_vector(key, self.table_seed, self.d_model)
        return self._cache[key]

    def encode(self, response: StructuredResponse) -> ContextEmbedding:
        tokens = []
        for det in response.detections:
            pos = np.array([det.cx, det.cy]) / POSITION_SCALE
            tokens.append(self.vector("label:" + det.label) + self.position_map @ pos)
        tokens.append(self.vector("advice:" + response.advice.value))
        return ContextEmbedding(np.array(tokens))


def encode_context(response: StructuredResponse, table_seed: int, d_model: int) -> ContextEmbedding:
    """One token per detection (hashed label + linear position code) and a final advice token."""
    return EmbeddingTable(table_seed, d_model).encode(response)


def align_responses(responses: Sequence[StructuredResponse], scenarios: Sequence[Scenario]):
    """Pair responses with scenarios by id, in scenario order for those present."""
    by_id = {s.id: s for s in scenarios}
    pairs = []
    for r in responses:
        if r.scenario_id not in by_id:
            raise AlignmentError(f"response references unknown scenario id {r.scenario_id!r}")
        pairs.append((by_id[r.scenario_id], r))
    return pairs
