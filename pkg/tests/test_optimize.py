import numpy as np
import pytest

from longreg.config import RegistrationConfig, StageSpec
from longreg.grid import (
    GridSpec,
    ImageSeries,
    VectorField,
    Volume,
    identity_positions,
    jacobian_det,
    trilinear_gather,
    zero_field,
)
from longreg.objective import _gradient_adjoint_axis, _reg_l2_raw
from longreg.optimize import (
    DivergenceError,
    OptimState,
    RegistrationParams,
    adam_step,
    loss_and_grad,
    lr_at,
    register_series,
)
from longreg.synth import ellipsoid_phantom, smooth_sigma_vox

from conftest import smooth_flow


# ---------------------------------------------------------------------------
# Adam and the schedule
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params(rng):
    p = [rng.normal(size=(4, 3))]
    state = OptimState.for_params(p)
    state.m[0][:] = 0.3  # pre-loaded moments decay without gradient
    out = adam_step(state, p, [np.zeros_like(p[0])], 0.1)
    # moments decayed, but the update moves params only through the stale moment
    assert np.all(state.m[0] == 0.3 * 0.9)
    out2 = adam_step(OptimState.for_params(p), p, [np.zeros_like(p[0])], 0.1)
    assert np.array_equal(out2[0], p[0])


def test_adam_constant_gradient_update_approaches_lr():
    p = [np.zeros((1,))]
    state = OptimState.for_params(p)
    g = [np.full((1,), 3.7)]
    prev = p[0].copy()
    for _ in range(500):
        p = adam_step(state, p, g, 0.01)
    step = prev - p[0]  # cumulative; check the last single step instead
    before = p[0].copy()
    p = adam_step(state, p, g, 0.01)
    assert abs(abs(float(before - p[0])) - 0.01) < 1e-6


def test_adam_matches_scalar_reference():
    # oracle: straightforward scalar Adam on a quadratic bowl f(x) = 0.5 x^2
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    x_ref, m, v = 1.0, 0.0, 0.0
    xs_ref = []
    for t in range(1, 51):
        g = x_ref
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        x_ref = x_ref - lr * mh / (np.sqrt(vh) + eps)
        xs_ref.append(x_ref)

    p = [np.array([1.0])]
    state = OptimState.for_params(p, b1, b2, eps)
    xs = []
    for _ in range(50):
        p = adam_step(state, p, [p[0].copy()], lr)
        xs.append(float(p[0][0]))
    assert np.allclose(xs, xs_ref, atol=1e-12)


def test_lr_schedule_shape():
    n, base = 100, 0.4
    assert lr_at(20, n, base) == pytest.approx(base)  # warmup boundary
    assert lr_at(0, n, base) == pytest.approx(base / 20)
    assert lr_at(60, n, base) == pytest.approx(base / 2)  # cosine midpoint
    assert lr_at(n - 1, n, base) < 0.01 * base
    assert lr_at(99, 100, 1.0) > 0.0


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def test_gradient_adjoint_axis_identity(rng):
    for n in (2, 3, 5, 8):
        f = rng.normal(size=(n, 4))
        g = rng.normal(size=(n, 4))
        lhs = np.sum(np.gradient(f, axis=0) * g)
        rhs = np.sum(f * _gradient_adjoint_axis(g, 0))
        assert lhs == pytest.approx(rhs, rel=1e-12)


def test_l2_gradient_formula(rng):
    flows = [rng.normal(size=(5, 5, 5, 3)) for _ in range(3)]
    _, grads = _reg_l2_raw(flows, want_grad=True)
    for f, g in zip(flows, grads):
        assert np.allclose(g, 2.0 * f / (3 * 125), rtol=1e-12)


def _two_image_problem(dims=(10, 10, 10), seed=2):
    rng = np.random.default_rng(seed)
    base = ellipsoid_phantom(dims, texture_amp=0.1, seed=4)
    warp = smooth_sigma_vox(rng.standard_normal(dims + (3,)), 2.0)
    warp *= 0.7 / np.abs(warp).max()
    moved = trilinear_gather(base.data, identity_positions(dims) + warp) * 1.05 + 0.01
    series = ImageSeries([base, Volume(base.grid, moved)], [0.0, 1.0])
    return series


def test_similarity_gradient_vanishes_for_identical_images(phantom16):
    series = ImageSeries([phantom16, Volume(phantom16.grid, phantom16.data.copy())], [0.0, 1.0])
    # the eps guard shifts the similarity minimum by O(eps); at 1e-6 the
    # residual gradient sits safely under the 1e-7 stationarity bound
    cfg = RegistrationConfig(exp_n_iter=5, eps_scale=1e-6)
    flow_grid = GridSpec((8, 8, 8), (2.0, 2.0, 2.0), (0.5, 0.5, 0.5))
    params = RegistrationParams([zero_field(flow_grid)], np.zeros((2, 6)))
    bd, g_flows, g_rigid = loss_and_grad(params, series, cfg)
    assert bd.sim_total <= 1e-6
    assert np.abs(g_flows[0]).max() <= 1e-7
    assert np.abs(g_rigid).max() <= 1e-7


def test_loss_and_grad_matches_finite_differences():
    series = _two_image_problem()
    cfg = RegistrationConfig(exp_n_iter=5)
    flow_grid = GridSpec((5, 5, 5), (2.0, 2.0, 2.0), (0.5, 0.5, 0.5))
    rng = np.random.default_rng(3)
    fluct = smooth_sigma_vox(rng.standard_normal((5, 5, 5, 3)), 1.0)
    theta = fluct * (0.05 / np.abs(fluct).max()) + np.array([0.15, 0.18, -0.16])
    rigid = np.zeros((2, 6))
    rigid[1] = [0.005, -0.004, 0.006, 0.45, 0.55, -0.5]
    params = RegistrationParams([VectorField(flow_grid, theta)], rigid.copy())
    bd, g_flows, g_rigid = loss_and_grad(params, series, cfg)

    def loss_at(th, rg):
        b, _, _ = loss_and_grad(RegistrationParams([VectorField(flow_grid, th)], rg), series, cfg)
        return b.total

    h = 1e-3
    check_rng = np.random.default_rng(7)
    for _ in range(30):
        if check_rng.uniform() < 0.2:
            c = int(check_rng.integers(6))
            rp = rigid.copy()
            rp[1, c] += h
            rm = rigid.copy()
            rm[1, c] -= h
            fd = (loss_at(theta, rp) - loss_at(theta, rm)) / (2 * h)
            an = g_rigid[1, c]
        else:
            ix = tuple(check_rng.integers(5, size=3)) + (int(check_rng.integers(3)),)
            tp = theta.copy()
            tp[ix] += h
            tm = theta.copy()
            tm[ix] -= h
            fd = (loss_at(tp, rigid) - loss_at(tm, rigid)) / (2 * h)
            an = g_flows[0][ix]
        assert abs(fd - an) <= max(1e-6, 1e-3 * abs(fd)), (fd, an)


def test_loss_and_grad_raises_on_nonfinite_term():
    series = _two_image_problem()
    cfg = RegistrationConfig(exp_n_iter=4)
    flow_grid = GridSpec((5, 5, 5), (2.0, 2.0, 2.0), (0.5, 0.5, 0.5))
    huge = np.full((5, 5, 5, 3), 1e200)
    params = RegistrationParams([VectorField(flow_grid, huge)], np.zeros((2, 6)))
    with pytest.raises(DivergenceError) as exc:
        loss_and_grad(params, series, cfg)
    assert exc.value.term  # names the offending term


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def _quick_cfg(iters=(30, 15)):
    return RegistrationConfig(
        stages=[
            StageSpec(2, 4, iters[0], 0.1),
            StageSpec(1, 2, iters[1], 0.05),
        ],
        exp_n_iter=5,
    )


def test_register_identical_images_recovers_no_motion(phantom16):
    series = ImageSeries([phantom16, Volume(phantom16.grid, phantom16.data.copy())], [0.0, 1.0])
    result = register_series(series, _quick_cfg())
    flow = result.gap_flow(0)
    mean_mag = np.sqrt((flow.data**2).sum(axis=-1)).mean()
    assert mean_mag < 0.05
    det = jacobian_det(result.composed(1, 0)).data
    assert det.min() > 0.98 and det.max() < 1.02


def test_register_series_deterministic(phantom16):
    series = ImageSeries([phantom16, Volume(phantom16.grid, phantom16.data * 1.1 + 0.02)], [0.0, 1.0])
    cfg = _quick_cfg(iters=(10, 5))
    r1 = register_series(series, cfg)
    r2 = register_series(series, cfg)
    for f1, f2 in zip(r1.flow_params, r2.flow_params):
        assert np.array_equal(f1.data, f2.data)
    assert np.array_equal(r1.rigid, r2.rigid)
    assert r1.trace == r2.trace


def test_register_needs_two_sessions(phantom16):
    with pytest.raises(ValueError):
        register_series(ImageSeries([phantom16], [0.0]), _quick_cfg())


def test_register_loss_trace_decreases(phantom16, rng):
    g = phantom16.grid
    warp = smooth_flow(g.dims, 1.0, 2.0, seed=13)
    moved = trilinear_gather(phantom16.data, identity_positions(g.dims) + warp)
    series = ImageSeries([phantom16, Volume(g, moved)], [0.0, 1.0])
    result = register_series(series, _quick_cfg())
    # per stage, the window-averaged loss should end no higher than it started
    for s in {row["stage"] for row in result.trace}:
        totals = [row["total"] for row in result.trace if row["stage"] == s]
        w = min(5, len(totals) // 2)
        assert np.mean(totals[-w:]) <= np.mean(totals[:w]) * 1.02, f"stage {s}"


def test_composed_deformation_matches_chain(phantom16):
    series = ImageSeries(
        [phantom16, Volume(phantom16.grid, phantom16.data * 1.02), Volume(phantom16.grid, phantom16.data * 0.98)],
        [0.0, 1.0, 2.0],
    )
    result = register_series(series, _quick_cfg(iters=(6, 3)))
    u = result.composed(2, 0)
    assert u.data.shape == phantom16.grid.dims + (3,)
    det = result.jacobian_det_map(2, 0)
    assert det.data.min() > 0
