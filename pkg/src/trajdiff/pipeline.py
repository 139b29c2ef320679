"""Glue between stages: training sets from scenarios and responses, and batched sampling."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from typing import Sequence

import numpy as np

from .config import RunConfig
from .denoiser import Condition, Denoiser, DenoiserConfig, train
from .diffusion import (
    DiffusionSchedule,
    ReverseTimeGrid,
    Standardizer,
    TrainingExample,
    draw_timestep,
    example_seed,
    fit_standardizer,
    forward_noise,
    make_reverse_grid,
    make_schedule,
    reverse_weights,
    start_scale,
)
from .evaluate import evaluate_paths
from .proposer import ContextEmbedding, EmbeddingTable, StructuredResponse, propose
from .scene import BevGrid, GridConfig, Path, Scenario, rasterize_bev
from .stats import NoiseModel


@dataclass(frozen=True)
class SceneInputs:
    """Everything derived from one scenario and its response that conditions the denoiser."""

    scenario: Scenario
    response: StructuredResponse
    bev: BevGrid
    context: ContextEmbedding


def mock_responses(scenarios: Sequence[Scenario], noise_model: NoiseModel, seed: int) -> list[StructuredResponse]:
    return [propose(s, noise_model, seed) for s in scenarios]


def parallel_map(fn, items: Sequence, jobs: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally across processes; order is always preserved."""
    if jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def scene_inputs(scenarios: Sequence[Scenario], responses: Sequence[StructuredResponse],
                 grid_config: GridConfig, table_seed: int, d_model: int, jobs: int = 1) -> list[SceneInputs]:
    if len(scenarios) != len(responses):
        raise ValueError(f"{len(scenarios)} scenarios vs {len(responses)} responses")
    table = EmbeddingTable(table_seed, d_model)
    grids = parallel_map(partial(rasterize_bev, grid_config=grid_config), scenarios, jobs)
    return [SceneInputs(s, r, g, table.encode(r)) for s, r, g in zip(scenarios, responses, grids)]


def build_training_set(inputs: Sequence[SceneInputs], noise_model: NoiseModel, schedule: DiffusionSchedule,
                       draws: int, seed: int) -> list[TrainingExample]:
    """``draws`` forward-noised copies of every ground-truth path, each at its own uniform timestep.

    Each example's seed depends only on ``(seed, scenario seed, draw)``, so the
    set does not depend on scenario order or batching.
    """
    out = []
    for inp in inputs:
        gt = inp.scenario.gt_path
        for k in range(draws):
            ex_seed = example_seed(seed, inp.scenario.seed, k)
            i = draw_timestep(ex_seed, schedule.T)
            noised = forward_noise(gt, i, schedule, noise_model, ex_seed)
            out.append(TrainingExample(inp.bev, inp.context, noised, i, gt, inp.scenario.id, ex_seed))
    return out


class GroundTruthOracle:
    """Stand-in denoiser that always predicts each scenario's ground-truth path.

    It starts the reverse loop from the unscaled proposal, so with a
    zero-noise proposer the sampled path equals the ground truth.
    """

    def __init__(self, standardizer: Standardizer | None = None):
        self.standardizer = standardizer or Standardizer.identity()


def sample_batch(model: Denoiser, conds: Sequence[Condition], proposals: np.ndarray,
                 grid: ReverseTimeGrid) -> np.ndarray:
    """Reverse loop for many paths at once; same arithmetic as ``diffusion.sample`` per path.

    ``proposals`` are raw paths in meters, shape ``(B, n, 2)``. Returns meters.
    """
    st = model.standardizer
    scale = start_scale(model.schedule, model.time_mapping)
    z = st.forward(scale * np.asarray(proposals, dtype=np.float64))
    t = grid.t_values
    for k in range(grid.K):
        pred = model.predict(z, conds, model.timestep_for(float(t[k])))
        keep, move = reverse_weights(float(t[k]), float(t[k + 1]))
        z = keep * z + move * pred
    return st.inverse(z)


def _oracle_batch(oracle: GroundTruthOracle, gts: np.ndarray, proposals: np.ndarray,
                  grid: ReverseTimeGrid) -> np.ndarray:
    st = oracle.standardizer
    z = st.forward(np.asarray(proposals, dtype=np.float64))
    pred = st.forward(gts)
    t = grid.t_values
    for k in range(grid.K):
        keep, move = reverse_weights(float(t[k]), float(t[k + 1]))
        z = keep * z + move * pred
    return st.inverse(z)


def sample_paths(model, inputs: Sequence[SceneInputs], grid: ReverseTimeGrid,
                 batch_size: int = 256) -> list[Path]:
    """Sampled paths (meters) for every input, from a ``Denoiser`` or a ``GroundTruthOracle``."""
    out = []
    for start in range(0, len(inputs), batch_size):
        chunk = inputs[start:start + batch_size]
        props = np.stack([inp.response.proposed_path.waypoints for inp in chunk])
        if isinstance(model, GroundTruthOracle):
            gts = np.stack([inp.scenario.gt_path.waypoints for inp in chunk])
            res = _oracle_batch(model, gts, props, grid)
        else:
            conds = [model.condition(inp.bev, inp.context) for inp in chunk]
            res = sample_batch(model, conds, props, grid)
        out += [Path(res[b], chunk[b].response.proposed_path.dt) for b in range(len(chunk))]
    return out


# --------------------------------------------------------------------------- experiments

def schedule_for(cfg: RunConfig) -> DiffusionSchedule:
    d = cfg.diffusion
    return make_schedule(d.T, d.beta_start, d.beta_end)


def reverse_grid_for(cfg: RunConfig) -> ReverseTimeGrid:
    d = cfg.diffusion
    return make_reverse_grid(d.K, d.t_start, d.t_end)


def fit_model(train_inputs: Sequence[SceneInputs], noise_model: NoiseModel, cfg: RunConfig,
              denoiser_config: DenoiserConfig | None = None, seed_offset: int = 0, progress=None):
    """Noise the training paths, fit the standardizer, build and train a denoiser.

    ``seed_offset`` shifts the init and shuffle seeds (ablation repeats); the
    noised training set is the same for every offset.
    """
    d = cfg.diffusion
    schedule = schedule_for(cfg)
    examples = build_training_set(train_inputs, noise_model, schedule, d.draws_per_scenario,
                                  cfg.seeds.resolve("noising"))
    st = fit_standardizer([e.noised_path for e in examples])
    model = Denoiser.create(denoiser_config or cfg.denoiser, cfg.seeds.resolve("init") + seed_offset,
                            standardizer=st, schedule=schedule,
                            schedule_args=(d.T, d.beta_start, d.beta_end), time_mapping=d.time_mapping)
    return train(model, examples, cfg.optimizer, cfg.seeds.resolve("shuffle") + seed_offset, progress)


def run_eval(model, inputs: Sequence[SceneInputs], cfg: RunConfig):
    """Sample every input and score both sampled paths and raw proposals.

    Returns ``(sampled report, proposal report, sampled paths)``.
    """
    e = cfg.eval
    sampled = sample_paths(model, inputs, reverse_grid_for(cfg))
    scenarios = [inp.scenario for inp in inputs]
    proposals = [inp.response.proposed_path for inp in inputs]
    return (evaluate_paths(sampled, scenarios, e.l2_mode, e.collision_mode, e.horizons),
            evaluate_paths(proposals, scenarios, e.l2_mode, e.collision_mode, e.horizons),
            sampled)
