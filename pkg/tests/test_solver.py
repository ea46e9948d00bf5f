"""HQS solver tests: weights, init, data step, prox, end-to-end properties."""

import numpy as np
import pytest

import cvxpy as cp

from rawburst import (
    AffineWarpField,
    BurstOperator,
    DivergedError,
    HqsConfig,
    IdentityPrior,
    ResidualConfidence,
    SensorConfig,
    TvL1Prior,
    demosaic_bilinear,
    fusion_weights,
    init_z,
    lipschitz_estimate,
    prox_tv_l1,
    reconstruct,
)
from rawburst.solver import surrogate_objective, z_update

from conftest import make_frame, make_meta


def _identity_fields(shape, k, k0=0):
    return [
        AffineWarpField.identity(shape, reference=(i == k0)) for i in range(k)
    ]


# ---------------------------------------------------------------------------
# fusion weights
# ---------------------------------------------------------------------------


def test_weights_single_frame_all_ones():
    meta = make_meta([1.0])
    frames = [make_frame(np.full((8, 8), 0.4))]
    w = fusion_weights(frames, meta, _identity_fields((8, 8), 1))
    assert w.shape == (1, 8, 8)
    assert np.allclose(w, 1.0)


def test_weights_exposure_proportional():
    meta = make_meta([1.0, 3.0])
    frames = [make_frame(np.full((8, 8), 0.2), exposure=t) for t in (1.0, 3.0)]
    w = fusion_weights(frames, meta, _identity_fields((8, 8), 2))
    assert np.allclose(w[0], 0.25)
    assert np.allclose(w[1], 0.75)


def test_weights_all_saturated_uniform_fallback():
    meta = make_meta([1.0, 2.0, 4.0])
    data = np.full((8, 8), 0.3)
    data[2:4, 2:4] = 1.0
    frames = [make_frame(data, exposure=t) for t in (1.0, 2.0, 4.0)]
    w = fusion_weights(frames, meta, _identity_fields((8, 8), 3))
    assert np.allclose(w[:, 2:4, 2:4], 1.0 / 3.0)
    assert np.allclose(w.sum(axis=0), 1.0)


def test_weights_partition_of_unity_mixed():
    meta = make_meta([1.0, 2.0])
    a = np.full((8, 8), 0.5)
    b = np.full((8, 8), 0.5)
    b[0:2, :] = 0.99  # saturated only in frame 1
    frames = [make_frame(a), make_frame(b, exposure=2.0)]
    w = fusion_weights(frames, meta, _identity_fields((8, 8), 2))
    assert np.allclose(w.sum(axis=0), 1.0)
    assert np.allclose(w[1][0:2, :], 0.0)
    assert np.allclose(w[0][0:2, :], 1.0)


def test_residual_confidence_range():
    conf = ResidualConfidence(sigma=0.05)
    a = np.random.default_rng(0).uniform(size=(8, 8))
    g = conf(a, a + 0.1)
    assert np.all((g >= 0.0) & (g <= 1.0))
    assert np.allclose(conf(a, a), 1.0)


# ---------------------------------------------------------------------------
# init_z
# ---------------------------------------------------------------------------


def test_init_constant_gray():
    meta = make_meta([1.0])
    frames = [make_frame(np.full((8, 8), 0.42))]
    z = init_z(frames, meta, _identity_fields((8, 8), 1))
    assert z.shape == (8, 8, 3)
    assert np.allclose(z, 0.42)


def test_init_no_exposure_bias():
    # consistent noise-free frames at exposures 1 and 2 give an unbiased init
    rng = np.random.default_rng(1)
    scene = rng.uniform(0.05, 0.45, size=(16, 16))
    meta = make_meta([1.0, 2.0])
    frames = [make_frame(scene, 1.0), make_frame(np.clip(2 * scene, 0, 1), 2.0)]
    z = init_z(frames, meta, _identity_fields((16, 16), 2))
    ref = init_z([frames[0]], make_meta([1.0]), _identity_fields((16, 16), 1))
    assert np.allclose(z, ref, atol=1e-12)


def test_init_upscales_dimensions():
    meta = make_meta([1.0], scale=2)
    frames = [make_frame(np.full((8, 8), 0.3))]
    z = init_z(frames, meta, [AffineWarpField.identity((16, 16), reference=True)])
    assert z.shape == (16, 16, 3)


# ---------------------------------------------------------------------------
# z-step
# ---------------------------------------------------------------------------


def _toy_problem(rng, k=2, hr=8, scale=1):
    sensor = SensorConfig()
    meta = make_meta([1.0] * k, scale=scale, sensor=sensor)
    fields = []
    for i in range(k):
        if i == 0:
            fields.append(AffineWarpField.identity((hr, hr), reference=True))
        else:
            mat = np.array([[1.0, 0.0, 0.6 * i], [0.0, 1.0, -0.4 * i]])
            fields.append(AffineWarpField.from_global(mat, (hr, hr)))
    op = BurstOperator(meta, fields)
    zstar = rng.uniform(0.1, 0.9, size=(hr, hr, 3))
    ys = [op.apply(zstar, i) for i in range(k)]
    weights = np.ones((k, hr // scale, hr // scale))
    return op, zstar, ys, weights


def test_z_update_stationary_point(rng):
    op, zstar, ys, weights = _toy_problem(rng)
    out = z_update(zstar.copy(), zstar.copy(), op, weights, ys, 0.3, 0.0, steps=5)
    assert np.abs(out - zstar).max() < 1e-8


def test_z_update_single_step_closed_form(rng):
    # K=1, s=1, identity warp: A selects CFA sites, so one step with delta=1
    # copies y into the selected channel entries and leaves the rest
    op, zstar, ys, weights = _toy_problem(rng, k=1)
    z0 = rng.uniform(0.1, 0.9, size=zstar.shape)
    out = z_update(z0.copy(), z0.copy(), op, weights, ys, 1.0, 0.0, steps=1)
    assert np.allclose(op.apply(out, 0), ys[0], atol=1e-12)
    sampled = op.adjoint(np.ones_like(ys[0]), 0) > 0
    assert np.array_equal(out[~sampled], z0[~sampled])


def test_z_update_objective_non_increasing(rng):
    op, zstar, ys, weights = _toy_problem(rng, k=3)
    L, hist = lipschitz_estimate(op, weights)
    eta = 1.0
    delta = 0.9 / (L + eta)
    z0 = np.zeros_like(zstar)
    trace = [surrogate_objective(z0, z0, op, weights, ys, eta)]
    z_update(z0.copy(), z0.copy(), op, weights, ys, delta, eta, steps=10, trace=trace)
    diffs = np.diff(trace)
    assert np.all(diffs <= 1e-12)


@pytest.mark.filterwarnings("ignore:overflow")
@pytest.mark.filterwarnings("ignore:invalid value")
def test_z_update_diverges_loudly(rng):
    op, zstar, ys, weights = _toy_problem(rng, k=3)
    with pytest.raises(DivergedError):
        z_update(
            np.zeros_like(zstar), np.zeros_like(zstar), op, weights, ys,
            1e12, 0.0, steps=200,
        )


# ---------------------------------------------------------------------------
# Lipschitz estimate
# ---------------------------------------------------------------------------


def test_lipschitz_cfa_selector_is_one():
    meta = make_meta([1.0])
    op = BurstOperator(meta, [AffineWarpField.identity((8, 8), reference=True)])
    w = np.ones((1, 8, 8))
    L, hist = lipschitz_estimate(op, w)
    assert L == pytest.approx(1.0, rel=0.01)


def test_lipschitz_quadratic_scaling():
    f = [AffineWarpField.identity((8, 8), reference=True)]
    w = np.ones((1, 8, 8))
    L1, _ = lipschitz_estimate(BurstOperator(make_meta([1.0]), f), w)
    L2, _ = lipschitz_estimate(BurstOperator(make_meta([2.0]), f), w)
    assert L2 == pytest.approx(4.0 * L1, rel=0.01)


def test_lipschitz_history_non_decreasing(rng):
    op, _, _, weights = _toy_problem(rng, k=3)
    _, hist = lipschitz_estimate(op, weights)
    assert np.all(np.diff(hist) >= -1e-9)


# ---------------------------------------------------------------------------
# TV prox
# ---------------------------------------------------------------------------


def test_prox_gamma_zero_identity(rng):
    z = rng.uniform(size=(6, 6, 3))
    assert np.array_equal(prox_tv_l1(z, 0.0), z)
    assert np.array_equal(TvL1Prior()(z, 0.0), z)
    assert IdentityPrior()(z, 0.3) is z


def test_prox_constant_unchanged():
    z = np.full((8, 8), 0.61)
    for g in (0.01, 0.1, 1.0):
        assert np.allclose(prox_tv_l1(z, g), 0.61)


def _tv1d_oracle(z, gamma):
    x = cp.Variable(z.size)
    obj = cp.Minimize(0.5 * cp.sum_squares(x - z) + gamma * cp.sum(cp.abs(cp.diff(x))))
    cp.Problem(obj).solve(solver=cp.CLARABEL)
    return x.value


@pytest.mark.parametrize("gamma", [0.02, 0.1])
@pytest.mark.parametrize("seed", [0, 1])
def test_prox_matches_1d_convex_oracle(gamma, seed):
    rng = np.random.default_rng(seed)
    z = np.where(np.arange(16) < 8, 0.2, 0.8) + 0.05 * rng.standard_normal(16)
    ours = prox_tv_l1(z[None, :], gamma, iters=200)[0]
    oracle = _tv1d_oracle(z, gamma)
    assert np.abs(ours - oracle).max() <= 1e-3


def test_prox_step_shrinks_plateaus():
    # analytic 1-D prox of a two-plateau signal moves each plateau by gamma/n
    n = 8
    z = np.concatenate([np.zeros(n), np.ones(n)])
    gamma = 0.1
    out = prox_tv_l1(z[None, :], gamma, iters=200)[0]
    assert np.allclose(out[:n], gamma / n, atol=1e-3)
    assert np.allclose(out[n:], 1.0 - gamma / n, atol=1e-3)


# ---------------------------------------------------------------------------
# full reconstruction properties
# ---------------------------------------------------------------------------


def test_reconstruct_identity_burst_equals_demosaic(rng):
    data = rng.uniform(0.1, 0.8, size=(16, 16))
    sensor = SensorConfig()
    meta = make_meta([1.0] * 3, sensor=sensor)
    frames = [make_frame(data, sensor=sensor) for _ in range(3)]
    fields = _identity_fields((16, 16), 3)
    cfg = HqsConfig(stages=2, gd_steps=3, eta=(1.0, 2.0), gamma=(0.0, 0.0), prior=IdentityPrior())
    x, info = reconstruct(frames, meta, cfg, fields=fields)
    assert np.allclose(x.data, demosaic_bilinear(data, sensor.pattern), atol=1e-10)


def test_reconstruct_stress_burst_finite():
    sensor = SensorConfig()
    meta = make_meta([1.0, 2.0, 0.5], sensor=sensor)
    rng = np.random.default_rng(3)
    frames = [
        make_frame(np.ones((16, 16)), exposure=1.0, sensor=sensor),
        make_frame(np.zeros((16, 16)), exposure=2.0, sensor=sensor),
        make_frame(rng.uniform(0.2, 0.7, size=(16, 16)), exposure=0.5, sensor=sensor),
    ]
    x, info = reconstruct(frames, meta, HqsConfig(), fields=_identity_fields((16, 16), 3))
    assert np.isfinite(x.data).all()
    for trace in info["objective_trace"]:
        assert np.isfinite(trace).all()


def test_reconstruct_traces_non_increasing_within_stage(rng):
    data = rng.uniform(0.1, 0.8, size=(16, 16))
    meta = make_meta([1.0] * 2)
    frames = [make_frame(data) for _ in range(2)]
    x, info = reconstruct(
        frames, meta, HqsConfig(gd_steps=5), fields=_identity_fields((16, 16), 2)
    )
    for trace in info["objective_trace"]:
        assert np.all(np.diff(trace) <= 1e-12)
