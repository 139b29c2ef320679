import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajdiff.diffusion import (
    ReverseTimeGrid,
    Standardizer,
    TrainingExample,
    destandardize,
    draw_timestep,
    example_seed,
    fit_standardizer,
    forward_noise,
    initial_state,
    make_reverse_grid,
    make_schedule,
    matched_start_index,
    read_example_refs,
    reverse_step,
    reverse_time_to_timestep,
    sample,
    standardize,
    start_scale,
    write_example_refs,
)
from trajdiff.errors import ConfigError, FittingError
from trajdiff.scene import BevGrid, Path, ground_truth_path
from trajdiff.stats import NoiseModel

BEV = BevGrid(np.zeros((1, 2, 2)), 0.5)


class Oracle:
    """Always predicts a fixed (standardized) target."""

    def __init__(self, target: Path, standardizer=None):
        self.target = target
        self.standardizer = standardizer or Standardizer.identity()
        self.calls = []

    def __call__(self, noisy, bev, context, t):
        self.calls.append(t)
        return self.target


def _path(a):
    return Path(np.asarray(a, dtype=float))


# --------------------------------------------------------------------------- schedule

def test_schedule_single_step():
    s = make_schedule(1, 0.1, 0.1)
    np.testing.assert_allclose(s.alpha_bar, [0.9])


def test_schedule_three_steps():
    s = make_schedule(3, 0.1, 0.3)
    np.testing.assert_allclose(s.beta, [0.1, 0.2, 0.3], atol=1e-15)
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72, 0.504], atol=1e-15)


@given(st.integers(1, 500), st.floats(1e-6, 0.5), st.floats(0.0, 0.49))
def test_schedule_invariants(T, lo, extra):
    hi = min(lo + extra, 0.99)
    s = make_schedule(T, lo, hi)
    assert s.T == T
    assert np.all((0 < s.beta) & (s.beta < 1))
    assert np.all((0 < s.alpha_bar) & (s.alpha_bar < 1))
    assert np.all(np.diff(s.alpha_bar) < 0)
    np.testing.assert_allclose(s.alpha_bar, np.cumprod(1 - s.beta), rtol=1e-12)


@pytest.mark.parametrize("args", [(0, 0.1, 0.2), (10, 0.0, 0.1), (10, 0.3, 0.2), (10, 0.1, 1.0)])
def test_schedule_rejects(args):
    with pytest.raises(ConfigError):
        make_schedule(*args)


def test_default_schedule_constants():
    s = make_schedule()
    assert s.T == 100 and s.beta[0] == 1e-4 and s.beta[-1] == 0.02


# --------------------------------------------------------------------------- forward noising

def test_zero_noise_is_pure_scaling():
    s = make_schedule()
    gt = ground_truth_path(3.0, 0.05)
    zero = NoiseModel.gaussian(0.0)
    for i in (0, 17, 99):
        out = forward_noise(gt, i, s, zero, seed=5)
        np.testing.assert_array_equal(out.waypoints, math.sqrt(s.alpha_bar[i]) * gt.waypoints)


def test_no_noise_limit():
    s = make_schedule(10, 1e-12, 1e-12)
    gt = ground_truth_path(3.0, 0.05)
    out = forward_noise(gt, 0, s, NoiseModel.gaussian(1.0), seed=1)
    np.testing.assert_allclose(out.waypoints, gt.waypoints, atol=1e-5)


def test_fixed_epsilon_half_alpha():
    # T=1 with beta=0.5 gives alpha_bar = 0.5 exactly
    s = make_schedule(1, 0.5, 0.5)
    gt = _path([[2.0, 0.0]] * 6)
    nm = NoiseModel(1.0, 1.0, 0.0, 0.0, 2)
    out = forward_noise(gt, 0, s, nm, seed=0)
    np.testing.assert_allclose(out.waypoints, [[2.1213203435596424, 0.7071067811865476]] * 6, atol=1e-12)


def test_forward_noise_reproducible():
    s = make_schedule()
    gt = ground_truth_path(3.0, 0.05)
    nm = NoiseModel.gaussian(0.5)
    a, b = forward_noise(gt, 40, s, nm, 123), forward_noise(gt, 40, s, nm, 123)
    assert a == b
    assert a != forward_noise(gt, 40, s, nm, 124)


def test_forward_noise_needs_fitted_model():
    with pytest.raises(FittingError):
        forward_noise(ground_truth_path(1, 0), 0, make_schedule(), NoiseModel(), 0)
    with pytest.raises(ValueError):
        forward_noise(ground_truth_path(1, 0), 100, make_schedule(), NoiseModel.gaussian(1), 0)


def test_forward_noise_distribution():
    s = make_schedule()
    gt = _path(np.zeros((6, 2)))
    nm = NoiseModel(0.2, -0.1, 0.5, 0.3, 2)
    pts = np.concatenate([forward_noise(gt, 50, s, nm, k).waypoints for k in range(4000)])
    scale = math.sqrt(1 - s.alpha_bar[50])
    np.testing.assert_allclose(pts.mean(axis=0), scale * nm.mean, atol=0.01)
    np.testing.assert_allclose(pts.std(axis=0), scale * nm.std, rtol=0.03)


# --------------------------------------------------------------------------- standardization

def test_standardize_round_trip(rng):
    paths = [Path(rng.normal(3, 2, (6, 2))) for _ in range(50)]
    st_ = fit_standardizer(paths)
    for p in paths:
        np.testing.assert_allclose(destandardize(standardize(p, st_), st_).waypoints, p.waypoints,
                                   rtol=0, atol=1e-12)


def test_standardized_moments(rng):
    paths = [Path(rng.normal([5, -3], [2, 0.5], (6, 2))) for _ in range(100)]
    st_ = fit_standardizer(paths)
    z = np.concatenate([standardize(p, st_).waypoints for p in paths])
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-9)


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.floats(-1e3, 1e3), st.floats(1e-3, 1e3))
def test_round_trip_property(seed, loc, scale):
    rng = np.random.default_rng(seed)
    paths = [Path(rng.normal(loc, scale, (6, 2))) for _ in range(5)]
    st_ = fit_standardizer(paths)
    for p in paths:
        back = destandardize(standardize(p, st_), st_).waypoints
        np.testing.assert_allclose(back, p.waypoints, rtol=1e-12, atol=1e-12 * (abs(loc) + scale))


def test_constant_dataset_rejected():
    with pytest.raises(FittingError):
        fit_standardizer([_path([[1.0, 2.0]] * 6)] * 3)
    with pytest.raises(FittingError):
        fit_standardizer([ground_truth_path(1, 0)])


# --------------------------------------------------------------------------- reverse step

def test_fixed_point(rng):
    p = Path(rng.normal(size=(6, 2)))
    out = reverse_step(p, p, 0.0, 0.3)
    np.testing.assert_allclose(out.waypoints, p.waypoints, rtol=0, atol=1e-12)


def test_small_h_returns_noisy(rng):
    a, b = Path(rng.normal(size=(6, 2))), Path(rng.normal(size=(6, 2)))
    out = reverse_step(a, b, 1.0, 1.0 + 1e-13)
    np.testing.assert_allclose(out.waypoints, a.waypoints, rtol=0, atol=1e-12)


def test_half_step():
    out = reverse_step(_path([[1.0, 0.0]] * 6), _path(np.zeros((6, 2))), 0.0, math.log(2))
    np.testing.assert_allclose(out.waypoints, [[0.5, 0.0]] * 6, rtol=0, atol=1e-12)


def test_reverse_step_errors():
    with pytest.raises(ValueError):
        reverse_step(_path(np.zeros((6, 2))), _path(np.zeros((5, 2))), 0, 1)
    with pytest.raises(ValueError):
        reverse_step(_path(np.zeros((6, 2))), _path(np.zeros((6, 2))), 1, 1)


@given(st.integers(0, 10_000), st.floats(0, 5), st.floats(1e-6, 5))
def test_convex_combination(seed, t0, h):
    rng = np.random.default_rng(seed)
    a, b = Path(rng.normal(size=(6, 2))), Path(rng.normal(size=(6, 2)))
    out = reverse_step(a, b, t0, t0 + h).waypoints
    lo, hi = np.minimum(a.waypoints, b.waypoints), np.maximum(a.waypoints, b.waypoints)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)
    w = math.exp(-h)
    np.testing.assert_allclose(out, w * a.waypoints + (1 - w) * b.waypoints, atol=1e-12)


# --------------------------------------------------------------------------- sampling

def test_reverse_grid():
    g = make_reverse_grid()
    assert g.K == 10
    np.testing.assert_allclose(np.diff(g.t_values), 0.3)
    np.testing.assert_allclose(g.sigma, np.exp(-g.t_values))
    with pytest.raises(ConfigError):
        ReverseTimeGrid(np.array([0.0, 0.0]))
    with pytest.raises(ConfigError):
        make_reverse_grid(3, 1.0, 1.0)


def test_oracle_contraction(rng):
    gt = Path(rng.normal(size=(6, 2)))
    start = Path(rng.normal(size=(6, 2)) * 3)
    grid = make_reverse_grid(10, 0.0, 3.0)
    out = sample(Oracle(gt), BEV, None, start, grid)
    bound = math.exp(-grid.total_time) * np.abs(start.waypoints - gt.waypoints).max()
    assert np.abs(out.waypoints - gt.waypoints).max() <= bound + 1e-9


def test_oracle_error_factor_is_exact(rng):
    gt = Path(rng.normal(size=(6, 2)))
    start = Path(rng.normal(size=(6, 2)))
    grid = ReverseTimeGrid(np.sort(rng.uniform(0, 4, 7)))
    out = sample(Oracle(gt), BEV, None, start, grid)
    np.testing.assert_allclose(out.waypoints - gt.waypoints,
                               math.exp(-grid.total_time) * (start.waypoints - gt.waypoints), atol=1e-9)


def test_oracle_monotone_convergence(rng):
    gt = Path(rng.normal(size=(6, 2)))
    current = Path(rng.normal(size=(6, 2)))
    grid = make_reverse_grid()
    errs = [np.abs(current.waypoints - gt.waypoints).max()]
    for k in range(grid.K):
        current = reverse_step(current, gt, grid.t_values[k], grid.t_values[k + 1])
        errs.append(np.abs(current.waypoints - gt.waypoints).max())
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_empty_grid_destandardizes(rng):
    st_ = Standardizer(1.0, -2.0, 3.0, 0.5)
    start = Path(rng.normal(size=(6, 2)))
    oracle = Oracle(start, st_)
    out = sample(oracle, BEV, None, start, make_reverse_grid(0))
    np.testing.assert_allclose(out.waypoints, st_.inverse(start.waypoints))
    assert oracle.calls == []


def test_start_at_target_is_fixed(rng):
    gt = Path(rng.normal(size=(6, 2)))
    out = sample(Oracle(gt), BEV, None, gt, make_reverse_grid())
    np.testing.assert_allclose(out.waypoints, gt.waypoints, rtol=0, atol=1e-12)


def test_sampler_passes_grid_times():
    gt = ground_truth_path(1, 0)
    oracle = Oracle(gt)
    sample(oracle, BEV, None, gt, make_reverse_grid(4, 0.0, 2.0))
    np.testing.assert_allclose(oracle.calls, [0.0, 0.5, 1.0, 1.5])


# --------------------------------------------------------------------------- time mapping

def test_matched_start_index():
    s = make_schedule()
    i = matched_start_index(s)
    assert abs(s.alpha_bar[i] - 0.5) == np.abs(s.alpha_bar - 0.5).min()
    assert start_scale(s, "matched") == pytest.approx(math.sqrt(s.alpha_bar[i]))
    assert start_scale(s, "direct") == 1.0
    with pytest.raises(ConfigError):
        start_scale(s, "bogus")


def test_matched_mapping_endpoints():
    s = make_schedule()
    i = matched_start_index(s)
    assert reverse_time_to_timestep(0.0, s) == pytest.approx(i)
    steps = [reverse_time_to_timestep(t, s) for t in np.linspace(0, 3, 11)]
    assert all(b < a for a, b in zip(steps, steps[1:]))
    # the signal weight at the mapped step equals the gt coefficient of the reverse state
    c = start_scale(s)
    for t, step in zip(np.linspace(0, 3, 11), steps):
        lo = int(math.floor(step))
        frac = step - lo
        hi = min(lo + 1, s.T - 1)
        signal = (1 - frac) * math.sqrt(s.alpha_bar[lo]) + frac * math.sqrt(s.alpha_bar[hi])
        assert signal == pytest.approx(1 - math.exp(-t) * (1 - c), abs=1e-12)


def test_other_mappings():
    s = make_schedule()
    assert reverse_time_to_timestep(0.0, s, "direct") == 100.0
    assert reverse_time_to_timestep(math.log(2), s, "direct") == pytest.approx(50.0)
    assert reverse_time_to_timestep(0.0, s, "noise") == pytest.approx(matched_start_index(s), abs=1.0)


def test_initial_state_scaling():
    st_ = Standardizer(1.0, 2.0, 2.0, 4.0)
    p = _path([[3.0, 6.0]] * 6)
    np.testing.assert_allclose(initial_state(p, st_, 0.5).waypoints, [[0.25, 0.25]] * 6)


# --------------------------------------------------------------------------- training examples

def test_example_seeds_and_timesteps():
    assert example_seed(1, 2, 3) == example_seed(1, 2, 3)
    assert example_seed(1, 2, 3) != example_seed(1, 2, 4)
    ts = [draw_timestep(example_seed(0, 9, k), 100) for k in range(2000)]
    assert min(ts) == 0 and max(ts) == 99
    assert abs(np.mean(ts) - 49.5) < 3


def test_training_example_validation():
    with pytest.raises(ValueError):
        TrainingExample(BEV, None, ground_truth_path(1, 0, 6), 0, ground_truth_path(1, 0, 5))


def test_example_refs_round_trip(tmp_path):
    gt = ground_truth_path(1, 0)
    exs = [TrainingExample(BEV, None, gt, k, gt, f"s{k}", 100 + k) for k in range(3)]
    path = tmp_path / "refs.jsonl"
    write_example_refs(path, exs)
    assert read_example_refs(path) == [{"scenario_id": f"s{k}", "timestep": k, "seed": 100 + k} for k in range(3)]
