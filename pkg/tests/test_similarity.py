import numpy as np
import pytest

from longreg.grid import GridSpec, Volume
from longreg.similarity import (
    EPS_SCALE_SILNCC,
    expected_lncc,
    lncc,
    mc_lncc_expectation,
    mc_offset_landscape,
    silncc,
    silncc_value_and_grad,
    window_stats,
)


def brute_force_stats(a, b, r):
    """Nested-loop window sums (oracle for the separable implementation)."""
    shape = a.shape
    saa = np.zeros(shape)
    sbb = np.zeros(shape)
    sab = np.zeros(shape)
    cnt = np.zeros(shape)
    for i in range(shape[0]):
        for j in range(shape[1]):
            for k in range(shape[2]):
                sl = (
                    slice(max(0, i - r), i + r + 1),
                    slice(max(0, j - r), j + r + 1),
                    slice(max(0, k - r), k + r + 1),
                )
                wa, wb = a[sl], b[sl]
                cnt[i, j, k] = wa.size
                saa[i, j, k] = ((wa - wa.mean()) ** 2).sum()
                sbb[i, j, k] = ((wb - wb.mean()) ** 2).sum()
                sab[i, j, k] = ((wa - wa.mean()) * (wb - wb.mean())).sum()
    return saa, sbb, sab, cnt


def test_window_sums_match_brute_force(rng):
    a = rng.normal(size=(12, 12, 12))
    b = rng.normal(size=(12, 12, 12))
    st = window_stats(a, b, 2)
    saa, sbb, sab, cnt = brute_force_stats(a, b, 2)
    for mine, oracle in ((st.saa, saa), (st.sbb, sbb), (st.sab, sab), (st.counts, cnt)):
        assert np.abs(mine - oracle).max() <= 1e-9 * np.abs(oracle).max()


def test_window_stats_rejects_bad_radius(rng):
    with pytest.raises(ValueError):
        window_stats(rng.normal(size=(4, 4, 4)), rng.normal(size=(4, 4, 4)), 0)


def test_lncc_perfect_correlation(rng):
    g = GridSpec((10, 10, 10))
    a = Volume(g, rng.normal(size=g.dims))
    loss, per = lncc(a, a, radius=1)
    assert loss <= 1e-6
    assert per.data.min() >= -1e-12


def test_lncc_affine_invariance(rng):
    g = GridSpec((10, 10, 10))
    a = Volume(g, rng.normal(size=g.dims))
    b = Volume(g, 2.0 * a.data + 3.0)
    loss, _ = lncc(a, b, radius=1)
    assert loss <= 1e-6


def test_lncc_grid_mismatch(rng):
    a = Volume(GridSpec((4, 4, 4)), rng.normal(size=(4, 4, 4)))
    b = Volume(GridSpec((4, 4, 5)), rng.normal(size=(4, 4, 5)))
    with pytest.raises(ValueError):
        lncc(a, b)


def test_lncc_per_region_range(rng):
    g = GridSpec((10, 10, 10))
    a = Volume(g, rng.normal(size=g.dims))
    b = Volume(g, rng.normal(size=g.dims))
    _, per = lncc(a, b, radius=1)
    assert per.data.min() >= -1e-9 and per.data.max() <= 2.0 + 1e-9


def test_lncc_noisy_step_matches_expected_value():
    # reference: clean 3D step; moving: same step plus noise at window CNR 1.
    # Window centers sit on the first high-side plane, where the 9/18 intensity
    # split gives a window contrast of h*sqrt(2)/3; sigma is set to match it.
    rng = np.random.default_rng(123)
    nx, ny, nz = 9, 40, 40
    g = GridSpec((nx, ny, nz))
    height = 1.0
    sigma = height * np.sqrt(2.0) / 3.0  # CNR = 1 in the probed windows
    step = np.where(np.arange(nx) >= 4, height, 0.0)[:, None, None] * np.ones((1, ny, nz))
    a = Volume(g, step)
    vals = []
    for _ in range(12):
        b = Volume(g, step + rng.normal(0.0, sigma, size=(nx, ny, nz)))
        _, per = lncc(a, b, radius=1, eps_scale=1e-12)
        vals.append(per.data[4, 1:-1, 1:-1])  # centers on the first high plane, full windows
    mean = float(np.mean(vals))
    assert abs(mean - (1.0 - 1.0 / np.sqrt(2.0))) <= 0.02


def test_silncc_linear_fit_residual(rng):
    g = GridSpec((24, 24, 24))
    a = Volume(g, rng.normal(size=g.dims))
    for c in (0.5, 1.0, 2.0):
        for d in (-1.0, 0.0, 3.0):
            b_data = c * a.data + d
            loss, _ = silncc(a, Volume(g, b_data), radius=1)
            bound = 1e-9 * np.mean((b_data - b_data.mean()) ** 2)
            assert loss <= bound, (c, d, loss, bound)


def test_silncc_constant_reference_penalizes_full_variance(rng):
    g = GridSpec((8, 8, 8))
    a = Volume(g, np.full(g.dims, 3.0))
    b = Volume(g, rng.normal(size=g.dims))
    _, per = silncc(a, b, radius=1)
    st = window_stats(a.data, b.data, 1)
    assert np.allclose(per.data, st.sbb / st.counts, atol=1e-9)


def test_silncc_flat_noise_matches_least_squares_oracle(rng):
    g = GridSpec((10, 10, 10))
    a_data = rng.normal(size=g.dims)
    b_data = rng.normal(size=g.dims)
    loss, per = silncc(Volume(g, a_data), Volume(g, b_data), radius=1)
    eps = max(EPS_SCALE_SILNCC * a_data.var(), np.finfo(np.float64).tiny)
    saa, sbb, sab, cnt = brute_force_stats(a_data, b_data, 1)
    oracle = (sbb - sab**2 / (saa + eps)) / cnt
    assert np.abs(per.data - oracle).max() <= 1e-9 * np.abs(oracle).max()
    assert per.data.min() >= -1e-12


def test_silncc_gradient_matches_finite_differences(rng):
    a = rng.normal(size=(9, 9, 9))
    b = rng.normal(size=(9, 9, 9))
    eps = 1e-5 * a.var()
    _, grad = silncc_value_and_grad(a, b, 1, eps)
    h = 1e-6
    for ix in [(0, 0, 0), (4, 5, 6), (8, 8, 8), (2, 0, 7)]:
        bp = b.copy()
        bp[ix] += h
        bm = b.copy()
        bm[ix] -= h
        vp, _ = silncc_value_and_grad(a, bp, 1, eps)
        vm, _ = silncc_value_and_grad(a, bm, 1, eps)
        assert grad[ix] == pytest.approx((vp - vm) / (2 * h), abs=1e-9)


def test_expected_lncc_closed_forms():
    assert expected_lncc(1.0, 1.0) == pytest.approx(1.0 - 1.0 / np.sqrt(2.0), abs=1e-12)
    assert expected_lncc(2.0, 1.0) == pytest.approx(1.0 - 1.0 / np.sqrt(1.25), abs=1e-12)
    assert expected_lncc(1e9, 1.0) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ValueError):
        expected_lncc(0.0, 1.0)


def test_mc_lncc_expectation_bias_bounds():
    cnrs = [0.5, 1.0, 2.0, 4.0]
    rows9 = mc_lncc_expectation(cnrs, 1.0, 9, 100_000, seed=42)
    rows27 = mc_lncc_expectation(cnrs, 1.0, 27, 100_000, seed=42)
    for r9, r27 in zip(rows9, rows27):
        assert abs(r9["residual"]) <= 0.02, r9
        assert abs(r27["residual"]) < abs(r9["residual"]), (r9, r27)


def test_mc_lncc_expectation_noiseless():
    rows = mc_lncc_expectation([np.inf], 1.0, 9, 1000, seed=0)
    assert abs(rows[0]["mean"]) <= 1e-12


def test_mc_lncc_expectation_validation():
    with pytest.raises(ValueError):
        mc_lncc_expectation([1.0], 1.0, 1, 1000, seed=0)
    with pytest.raises(ValueError):
        mc_lncc_expectation([1.0], 1.0, 9, 10, seed=0)


def test_mc_offset_landscape_zero_offset_noiseless():
    for metric in ("lncc", "silncc"):
        rows = mc_offset_landscape(metric, [np.inf], [0], 200, seed=0)
        assert abs(rows[0]["mean"]) <= 1e-3, (metric, rows[0])


def test_mc_offset_landscape_cnr_monotonicity():
    lrows = mc_offset_landscape("lncc", [0.5, 4.0], [2], 1500, seed=3)
    srows = mc_offset_landscape("silncc", [0.5, 4.0], [2], 1500, seed=3)
    l_by_cnr = {r["cnr"]: r["mean"] for r in lrows}
    s_by_cnr = {r["cnr"]: r["mean"] for r in srows}
    assert l_by_cnr[4.0] < l_by_cnr[0.5]
    assert s_by_cnr[4.0] > s_by_cnr[0.5]


def test_mc_offset_landscape_rejects_unknown_metric():
    with pytest.raises(ValueError):
        mc_offset_landscape("mse", [1.0], [0], 100, seed=0)
