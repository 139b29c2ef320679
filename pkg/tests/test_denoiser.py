import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajdiff.denoiser import (
    ARTIFACT_MAGIC,
    Denoiser,
    DenoiserConfig,
    LossBreakdown,
    OptimizerConfig,
    compress_bev,
    embed_timestep,
    grad_check,
    load_model,
    loss,
    path_loss,
    pool_context,
    random_batch,
    save_model,
    stack_conditions,
    train,
    write_loss_curve,
)
from trajdiff.diffusion import Standardizer, TrainingExample
from trajdiff.errors import ArtifactError, ConfigError, TrainingError
from trajdiff.proposer import ContextEmbedding
from trajdiff.scene import BevGrid, Path, ground_truth_path

from oracles import prefix_mse

SMALL = DenoiserConfig(d_model=16, layers=1, heads=2, bev_tokens=(4, 4), bev_channels=3)


def _inputs(rng, cfg=SMALL, hw=(16, 16), tokens=3):
    bev = BevGrid(rng.random((cfg.bev_channels, *hw)), 0.5)
    ctx = ContextEmbedding(rng.standard_normal((tokens, cfg.d_model)))
    return bev, ctx


def _example(rng, cfg=SMALL, timestep=10):
    bev, ctx = _inputs(rng, cfg)
    target = Path(rng.normal(size=(cfg.horizon, 2)) * 3)
    noised = Path(target.waypoints + rng.normal(size=(cfg.horizon, 2)))
    return TrainingExample(bev, ctx, noised, timestep, target, "s", 0)


# --------------------------------------------------------------------------- config

def test_default_config():
    c = DenoiserConfig()
    assert (c.d_model, c.layers, c.heads, c.bev_tokens) == (64, 2, 4, (8, 8))
    assert all(c.flags().values())


@pytest.mark.parametrize("kw", [{"d_model": 30, "heads": 4}, {"d_model": 15, "heads": 1}, {"layers": -1},
                                {"bev_tokens": (0, 8)}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        DenoiserConfig(**kw).validate()


def test_config_dict_round_trip():
    c = replace(SMALL, use_cap=False)
    assert DenoiserConfig.from_dict(c.to_dict()) == c


# --------------------------------------------------------------------------- timestep embedding

def test_embed_zero():
    e = embed_timestep(0.0, 8)
    np.testing.assert_array_equal(e, [0, 1, 0, 1, 0, 1, 0, 1])


def test_embed_formula():
    d = 64
    e = embed_timestep(3.7, d)
    k = np.arange(d // 2)
    np.testing.assert_allclose(e[0::2], np.sin(3.7 / 10000 ** (2 * k / d)), atol=1e-15)
    np.testing.assert_allclose(e[1::2], np.cos(3.7 / 10000 ** (2 * k / d)), atol=1e-15)


def test_embed_distinct_times():
    assert np.linalg.norm(embed_timestep(1.0, 64) - embed_timestep(1.5, 64)) > 0


@given(st.floats(-1e4, 1e4), st.integers(1, 64))
def test_embed_range(t, half):
    e = embed_timestep(t, 2 * half)
    assert e.shape == (2 * half,)
    assert np.all(np.abs(e) <= 1.0)


def test_embed_odd_dimension():
    with pytest.raises(ConfigError):
        embed_timestep(1.0, 7)


def test_embed_batched():
    ts = np.array([0.0, 2.0, 5.0])
    np.testing.assert_array_equal(embed_timestep(ts, 8)[1], embed_timestep(2.0, 8))


# --------------------------------------------------------------------------- BEV compression and pooling

def test_constant_grid_pools_to_constant():
    g = BevGrid(np.full((3, 16, 16), 0.25), 0.5)
    np.testing.assert_allclose(compress_bev(g, SMALL), 0.25)


def test_token_counts():
    g = BevGrid(np.zeros((3, 16, 16)), 0.5)
    assert compress_bev(g, SMALL).shape == (16, 3)
    assert compress_bev(g, replace(SMALL, use_bfc=False)).shape == (256, 3)


def test_one_hot_cell_block_average():
    data = np.zeros((1, 64, 64))
    data[0, 37, 12] = 1.0
    pooled = compress_bev(BevGrid(data, 0.5), DenoiserConfig(bev_channels=1))
    assert pooled.shape == (64, 1)
    expected = np.zeros(64)
    expected[(37 // 8) * 8 + 12 // 8] = 1 / 64
    np.testing.assert_allclose(pooled[:, 0], expected, atol=1e-15)


def test_bev_divisibility_error():
    with pytest.raises(ConfigError):
        compress_bev(BevGrid(np.zeros((3, 18, 16)), 0.5), SMALL)


def test_pool_context():
    u, v = np.arange(4.0), np.arange(4.0, 8.0)
    np.testing.assert_array_equal(pool_context(u[None], SMALL), u[None])
    np.testing.assert_array_equal(pool_context(np.stack([u, v]), SMALL), [(u + v) / 2])
    off = replace(SMALL, use_cap=False)
    np.testing.assert_array_equal(pool_context(np.stack([u, v]), off), np.stack([u, v]))


# --------------------------------------------------------------------------- forward

def test_output_shape_and_finite(rng):
    model = Denoiser.create(SMALL, 0)
    bev, ctx = _inputs(rng)
    out = model(Path(rng.normal(size=(6, 2))), bev, ctx, 0.9)
    assert out.n == 6 and np.all(np.isfinite(out.waypoints))


def test_zero_params_output_head_bias(rng):
    model = Denoiser.create(SMALL, 0)
    model.params[:] = 0.0
    model.layout.views(model.params)["head.b"][...] = [0.7, -1.3]
    bev, ctx = _inputs(rng)
    out = model(Path(rng.normal(size=(6, 2))), bev, ctx, 0.4)
    np.testing.assert_array_equal(out.waypoints, np.tile([0.7, -1.3], (6, 1)))


def test_wrong_horizon_rejected(rng):
    model = Denoiser.create(SMALL, 0)
    bev, ctx = _inputs(rng)
    with pytest.raises(ValueError):
        model(Path(rng.normal(size=(5, 2))), bev, ctx, 0.0)


def test_condition_shape_checks(rng):
    model = Denoiser.create(SMALL, 0)
    bev, ctx = _inputs(rng)
    with pytest.raises(ConfigError):
        model.condition(BevGrid(np.zeros((2, 16, 16)), 0.5), ctx)
    with pytest.raises(ConfigError):
        model.condition(bev, ContextEmbedding(np.zeros((1, 8))))


def test_bev_token_permutation_invariance(rng):
    model = Denoiser.create(SMALL, 1)
    model.params += rng.normal(0, 0.1, model.parameter_count)
    conds, batch = random_batch(SMALL, rng, 2, (16, 16))
    out, _ = model.forward(batch)
    perm = rng.permutation(batch.bev.shape[1])
    batch.bev = batch.bev[:, perm]
    batch.bev_pos = batch.bev_pos[perm]
    out2, _ = model.forward(batch)
    np.testing.assert_allclose(out, out2, rtol=0, atol=1e-9)


def test_deterministic(rng):
    model = Denoiser.create(SMALL, 0)
    bev, ctx = _inputs(rng)
    p = Path(rng.normal(size=(6, 2)))
    assert model(p, bev, ctx, 1.0) == model(p, bev, ctx, 1.0)


def test_attention_rows_in_model(rng):
    model = Denoiser.create(SMALL, 0)
    _, batch = random_batch(SMALL, rng, 3, (16, 16))
    _, cache = model.forward(batch)
    for bc in cache["blocks"]:
        for key in ("self", "cross"):
            a = bc[key]["attn"]
            assert np.all(a >= 0)
            np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-9)


def test_padded_context_is_ignored(rng):
    model = Denoiser.create(SMALL, 0)
    model.params += rng.normal(0, 0.1, model.parameter_count)
    bev, ctx = _inputs(rng, tokens=2)
    cfg = replace(SMALL, use_cap=False)
    model = Denoiser(cfg, model.params)
    long_ctx = ContextEmbedding(rng.standard_normal((6, cfg.d_model)))
    c_short, c_long = model.condition(bev, ctx), model.condition(bev, long_ctx)
    z = rng.normal(size=(2, 6, 2))
    alone = model.predict(z[:1], [c_short], 3.0)
    padded = model.predict(z, [c_short, c_long], 3.0)
    np.testing.assert_allclose(padded[:1], alone, atol=1e-12)


def test_parameter_count_depends_on_config_only():
    assert Denoiser.create(SMALL, 0).parameter_count == Denoiser.create(SMALL, 9).parameter_count
    counts = {name: Denoiser.create(replace(SMALL, **{name: False}), 0).parameter_count
              for name in ("use_tse", "use_caf", "use_cap", "use_bfc")}
    full = Denoiser.create(SMALL, 0).parameter_count
    d = SMALL.d_model
    assert counts["use_tse"] == full - d * d - d
    assert counts["use_caf"] < full
    assert counts["use_cap"] == counts["use_bfc"] == full


def test_ablation_flags_change_output(rng):
    base = Denoiser.create(SMALL, 0)
    bev, ctx = _inputs(rng)
    p = Path(rng.normal(size=(6, 2)))
    ref = base(p, bev, ctx, 1.0).waypoints
    for name in ("use_tse", "use_caf", "use_cap", "use_bfc"):
        model = Denoiser.create(replace(SMALL, **{name: False}), 0)
        out = model(p, bev, ctx, 1.0).waypoints
        assert np.all(np.isfinite(out))
        assert not np.array_equal(out, ref), name


def test_no_bfc_multiplies_bev_tokens(rng):
    bev, ctx = _inputs(rng)
    on = Denoiser.create(SMALL, 0).condition(bev, ctx)
    off = Denoiser.create(replace(SMALL, use_bfc=False), 0).condition(bev, ctx)
    assert off.bev.shape[0] == on.bev.shape[0] * (16 // 4) * (16 // 4)


# --------------------------------------------------------------------------- loss

def test_loss_zero_when_equal(rng):
    t = rng.normal(size=(1, 6, 2))
    lb, _ = path_loss(t, t.copy())
    assert lb.total == 0.0


def test_loss_unit_offset():
    target = np.zeros((1, 6, 2))
    pred = target + [1.0, 0.0]
    lb, _ = path_loss(pred, target)
    assert lb.waypoint_mse == pytest.approx(0.5, abs=1e-15)
    assert lb.cumsum_mse == pytest.approx(91 / 12, abs=1e-12)
    assert lb.total == pytest.approx(0.5 + 91 / 12)


def test_loss_matches_loop_oracle(rng):
    for _ in range(5):
        p, t = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
        lb, _ = path_loss(p[None], t[None])
        w, c = prefix_mse(p, t)
        assert lb.waypoint_mse == pytest.approx(w, rel=1e-12)
        assert lb.cumsum_mse == pytest.approx(c, rel=1e-12)


@given(st.integers(0, 10_000))
def test_loss_quadratic_homogeneity(seed):
    rng = np.random.default_rng(seed)
    t = rng.normal(size=(2, 6, 2))
    r = rng.normal(size=(2, 6, 2))
    a, _ = path_loss(t + r, t)
    b, _ = path_loss(t + 2 * r, t)
    assert b.waypoint_mse == pytest.approx(4 * a.waypoint_mse, rel=1e-12)
    assert b.cumsum_mse == pytest.approx(4 * a.cumsum_mse, rel=1e-12)


def test_loss_gradient(rng):
    p, t = rng.normal(size=(2, 6, 2)), rng.normal(size=(2, 6, 2))
    _, g = path_loss(p, t)
    eps = 1e-6
    for idx in [(0, 0, 0), (1, 3, 1), (0, 5, 1)]:
        q = p.copy()
        q[idx] += eps
        up = path_loss(q, t, False)[0].total
        q[idx] -= 2 * eps
        down = path_loss(q, t, False)[0].total
        assert g[idx] == pytest.approx((up - down) / (2 * eps), rel=1e-6)


def test_breakdown_total():
    assert LossBreakdown(1.25, 2.5).total == 3.75


def test_loss_on_example_is_in_meters(rng):
    ex = _example(rng)
    st_ = Standardizer(1.0, 2.0, 3.0, 4.0)
    model = Denoiser.create(SMALL, 0, standardizer=st_)
    lb = loss(model, ex)
    bev, ctx = ex.bev, ex.context
    z = st_.forward(ex.noised_path.waypoints)[None]
    pred = st_.inverse(model.predict(z, [model.condition(bev, ctx)], ex.timestep))
    w, c = prefix_mse(pred[0], ex.target.waypoints)
    assert lb.waypoint_mse == pytest.approx(w, rel=1e-12)
    assert lb.cumsum_mse == pytest.approx(c, rel=1e-12)


def test_full_batch_loss_order_invariant(rng):
    model = Denoiser.create(SMALL, 0)
    conds, batch = random_batch(SMALL, rng, 5, (16, 16))
    lb, g = model.loss_and_grad(batch)
    perm = rng.permutation(5)
    shuffled = stack_conditions([conds[i] for i in perm], batch.z[perm], batch.timestep[perm], batch.target[perm])
    lb2, g2 = model.loss_and_grad(shuffled)
    assert lb2.total == pytest.approx(lb.total, rel=1e-13)
    np.testing.assert_allclose(g2, g, rtol=1e-10, atol=1e-14)


# --------------------------------------------------------------------------- training

def test_overfit_single_example(rng):
    ex = _example(rng)
    model = Denoiser.create(SMALL, 0)
    trained, curve = train(model, [ex], OptimizerConfig(steps=200, batch_size=1), seed=0)
    assert curve[-1][3] < curve[0][3]
    assert loss(trained, ex).total < loss(model, ex).total


def test_zero_lr_leaves_params_unchanged(rng):
    ex = _example(rng)
    model = Denoiser.create(SMALL, 0)
    trained, _ = train(model, [ex], OptimizerConfig(lr=0.0, steps=5, batch_size=1))
    assert np.array_equal(trained.params, model.params)
    assert trained.params is not model.params


def test_training_is_deterministic(rng):
    data = [_example(rng, timestep=k) for k in range(6)]
    opt = OptimizerConfig(steps=15, batch_size=4)
    m = Denoiser.create(SMALL, 3)
    a, ca = train(m, data, opt, seed=11)
    b, cb = train(m, data, opt, seed=11)
    assert ca == cb
    assert np.array_equal(a.params, b.params)


def test_training_errors(rng):
    with pytest.raises(TrainingError):
        train(Denoiser.create(SMALL, 0), [], OptimizerConfig(steps=1))
    ex = _example(rng)
    model = Denoiser.create(SMALL, 0)
    model.params[:] = 1e200
    with np.errstate(all="ignore"), pytest.raises(TrainingError, match="batch scenarios: s"):
        train(model, [ex], OptimizerConfig(steps=1, batch_size=1))


def test_cosine_schedule():
    opt = OptimizerConfig(lr=1.0, steps=10, lr_schedule="cosine")
    assert opt.lr_at(0) == 1.0
    assert opt.lr_at(5) == pytest.approx(0.5)
    with pytest.raises(ConfigError):
        OptimizerConfig(lr_schedule="step").validate()


def test_loss_curve_csv(tmp_path):
    path = tmp_path / "loss.csv"
    write_loss_curve(path, [(0, 1.0, 2.0, 3.0), (5, 0.5, 0.25, 0.75)])
    lines = path.read_text().splitlines()
    assert lines[0] == "step,waypoint_mse,cumsum_mse,total"
    assert lines[2] == "5,0.5,0.25,0.75"


# --------------------------------------------------------------------------- gradient check

def test_grad_check_small_config():
    assert grad_check(SMALL, eps=1e-5, n_params=150, grid_hw=(16, 16)) < 1e-4


@pytest.mark.parametrize("flag", ["use_tse", "use_caf", "use_cap", "use_bfc"])
def test_grad_check_ablations(flag):
    cfg = replace(SMALL, **{flag: False})
    assert grad_check(cfg, eps=1e-5, n_params=120, grid_hw=(8, 8) if flag == "use_bfc" else (16, 16)) < 1e-4


@pytest.mark.xfail(strict=True, reason="central differences in float64 carry ~1e-11 absolute rounding noise at "
                                       "loss ~40, so entries with |grad| ~ 1e-3 cap agreement near 1e-8")
def test_grad_check_linear_only():
    assert grad_check(DenoiserConfig(layers=0), eps=1e-4, n_params=200) < 1e-8


def test_grad_check_linear_only_attainable():
    assert grad_check(DenoiserConfig(layers=0), eps=1e-4, n_params=200) < 1e-7


def test_linear_only_gradient_exact_by_complex_step(rng):
    # complex-step derivatives have no subtractive cancellation, so they pin the
    # analytic gradient to near machine precision where central differences cannot
    cfg = DenoiserConfig(layers=0)
    _, batch = random_batch(cfg, rng, 3)
    st_ = Standardizer(0.3, -0.2, 1.7, 0.8)
    model = Denoiser.create(cfg, 4, standardizer=st_)
    model.params = model.params + rng.normal(0.0, 0.1, model.parameter_count)
    _, analytic = model.loss_and_grad(batch)
    h = 1e-30
    for i in rng.choice(model.parameter_count, 60, replace=False):
        p = model.params.astype(complex)
        p[i] += 1j * h
        out, _ = model.forward(batch, p)
        diff = st_.inverse(out) - batch.target
        csum = np.cumsum(diff, axis=-2)
        total = np.mean(diff * diff) + np.mean(csum * csum)
        cs = total.imag / h
        assert abs(cs - analytic[i]) <= 1e-12 * max(1.0, abs(cs))


def test_grad_check_eps_doubling_is_smooth():
    a = grad_check(SMALL, eps=1e-5, n_params=60, grid_hw=(16, 16))
    b = grad_check(SMALL, eps=2e-5, n_params=60, grid_hw=(16, 16))
    assert math.isfinite(a) and math.isfinite(b)
    assert a < 1e-4 and b < 1e-4


@pytest.mark.slow
def test_grad_check_default_config():
    assert grad_check(DenoiserConfig(), eps=1e-5, n_params=200) < 1e-4


# --------------------------------------------------------------------------- artifact

def test_artifact_round_trip(tmp_path, rng):
    model = Denoiser.create(replace(SMALL, use_cap=False), 5, standardizer=Standardizer(0.1, 0.2, 3.0, 4.0),
                            time_mapping="noise")
    model.params += rng.normal(size=model.parameter_count)
    path = tmp_path / "m.bin"
    save_model(model, path)
    back = load_model(path)
    assert back.config == model.config
    assert back.standardizer == model.standardizer
    assert back.time_mapping == "noise"
    assert np.array_equal(back.params, model.params)
    np.testing.assert_array_equal(back.schedule.alpha_bar, model.schedule.alpha_bar)
    save_model(back, tmp_path / "m2.bin")
    assert (tmp_path / "m2.bin").read_bytes() == path.read_bytes()


def test_artifact_errors(tmp_path):
    model = Denoiser.create(SMALL, 0)
    path = tmp_path / "m.bin"
    save_model(model, path)
    raw = path.read_bytes()
    cases = {
        "magic": b"NOTMODEL" + raw[8:],
        "version": raw[:8] + (99).to_bytes(4, "little") + raw[12:],
        "truncated": raw[:-16],
        "short": raw[:10],
    }
    for name, blob in cases.items():
        bad = tmp_path / f"{name}.bin"
        bad.write_bytes(blob)
        with pytest.raises(ArtifactError):
            load_model(bad)
    with pytest.raises(ArtifactError):
        load_model(tmp_path / "missing.bin")
    assert raw.startswith(ARTIFACT_MAGIC)


def test_parameters_little_endian_float64(tmp_path):
    model = Denoiser.create(SMALL, 0)
    path = tmp_path / "m.bin"
    save_model(model, path)
    raw = path.read_bytes()
    tail = np.frombuffer(raw[-8 * model.parameter_count:], dtype="<f8")
    assert np.array_equal(tail, model.params)


@settings(max_examples=10)
@given(st.integers(1, 3), st.sampled_from([2, 4]), st.booleans(), st.booleans())
def test_parameter_count_reproducible(layers, heads, caf, tse):
    cfg = replace(SMALL, layers=layers, heads=heads, use_caf=caf, use_tse=tse)
    assert Denoiser.create(cfg, 0).parameter_count == Denoiser.create(cfg, 1).parameter_count
