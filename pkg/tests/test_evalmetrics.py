import numpy as np
import pytest

from longreg.evalmetrics import bias_slope, eu_distance, foreground_mask, vector_pcc
from longreg.grid import GridSpec, Mask, VectorField, Volume
from longreg.synth import ellipsoid_phantom

from conftest import smooth_flow


def _full_mask(grid):
    return Mask(grid, np.ones(grid.dims, dtype=bool))


def _random_field(grid, seed):
    return VectorField(grid, smooth_flow(grid.dims, 2.0, 1.5, seed=seed))


def test_eu_distance_identical_and_offset():
    g = GridSpec((8, 8, 8), spacing=(1.0, 1.0, 1.0))
    t = _random_field(g, 1)
    assert eu_distance(t, t, _full_mask(g)) == 0.0
    est = VectorField(g, t.data + np.array([1.0, 0.0, 0.0]))
    assert eu_distance(t, est, _full_mask(g)) == pytest.approx(1.0, rel=1e-12)


def test_eu_distance_respects_spacing():
    g = GridSpec((6, 6, 6), spacing=(2.0, 1.0, 1.0))
    t = _random_field(g, 2)
    est = VectorField(g, t.data + np.array([1.0, 0.0, 0.0]))
    assert eu_distance(t, est, _full_mask(g)) == pytest.approx(2.0, rel=1e-12)


def test_eu_distance_matches_nested_loop_oracle(rng):
    g = GridSpec((5, 5, 5), spacing=(1.0, 1.5, 0.5))
    t = VectorField(g, rng.normal(size=g.dims + (3,)))
    e = VectorField(g, rng.normal(size=g.dims + (3,)))
    mask = Mask(g, rng.uniform(size=g.dims) > 0.3)
    acc, cnt = 0.0, 0
    for i in range(5):
        for j in range(5):
            for k in range(5):
                if mask.data[i, j, k]:
                    d = (t.data[i, j, k] - e.data[i, j, k]) * np.array(g.spacing)
                    acc += np.sqrt((d**2).sum())
                    cnt += 1
    assert eu_distance(t, e, mask) == pytest.approx(acc / cnt, rel=1e-12)


def test_eu_distance_symmetric(rng):
    g = GridSpec((6, 6, 6))
    t = _random_field(g, 3)
    e = _random_field(g, 4)
    assert eu_distance(t, e, _full_mask(g)) == pytest.approx(eu_distance(e, t, _full_mask(g)), rel=1e-15)


def test_vector_pcc_basic_cases():
    g = GridSpec((8, 8, 8))
    t = _random_field(g, 5)
    m = _full_mask(g)
    assert vector_pcc(t, t, m) == pytest.approx(1.0, abs=1e-12)
    assert vector_pcc(t, VectorField(g, -t.data), m) == pytest.approx(-1.0, abs=1e-12)
    affine = VectorField(g, 2.0 * t.data + np.array([0.3, -0.2, 0.7]))
    assert vector_pcc(t, affine, m) == pytest.approx(1.0, abs=1e-12)
    neg = VectorField(g, -0.5 * t.data + np.array([0.1, 0.0, 0.0]))
    assert vector_pcc(t, neg, m) == pytest.approx(-1.0, abs=1e-12)


def test_bias_slope_recovers_planted_affine(rng):
    g = GridSpec((7, 7, 7))
    t = _random_field(g, 6)
    a_true = np.array([[0.9, 0.1, -0.05], [0.02, 1.1, 0.07], [-0.03, 0.04, 0.8]])
    b_true = np.array([0.5, -0.25, 0.1])
    est = VectorField(g, t.data @ a_true.T + b_true)
    slope, a, b = bias_slope(t, est, _full_mask(g))
    assert np.allclose(a, a_true, atol=1e-9)
    assert np.allclose(b, b_true, atol=1e-9)
    assert slope == pytest.approx(np.trace(a_true) / 3, abs=1e-9)


def test_bias_slope_underestimation():
    g = GridSpec((7, 7, 7))
    t = _random_field(g, 7)
    slope, _, _ = bias_slope(t, VectorField(g, 0.5 * t.data), _full_mask(g))
    assert slope == pytest.approx(0.5, abs=1e-9)
    slope, a, _ = bias_slope(t, t, _full_mask(g))
    assert slope == pytest.approx(1.0, abs=1e-9)
    assert np.allclose(a, np.eye(3), atol=1e-9)


def test_bias_slope_matches_normal_equations_oracle(rng):
    g = GridSpec((6, 6, 6))
    t = VectorField(g, rng.normal(size=g.dims + (3,)))
    e = VectorField(g, rng.normal(size=g.dims + (3,)))
    m = _full_mask(g)
    slope, a, b = bias_slope(t, e, m)
    x = np.concatenate([t.data.reshape(-1, 3), np.ones((g.n_voxels, 1))], axis=1)
    sol, *_ = np.linalg.lstsq(x, e.data.reshape(-1, 3), rcond=None)
    assert np.allclose(a, sol[:3].T, atol=1e-9)
    assert np.allclose(b, sol[3], atol=1e-9)


def test_bias_slope_degenerate_truth_raises():
    g = GridSpec((6, 6, 6))
    data = np.zeros(g.dims + (3,))
    data[..., 0] = smooth_flow(g.dims, 1.0, 1.5, seed=8)[..., 0]  # only x varies
    t = VectorField(g, data)
    with pytest.raises(ValueError, match="rank deficient"):
        bias_slope(t, t, _full_mask(g))


def test_foreground_mask_covers_phantom():
    vol = ellipsoid_phantom((24, 24, 24))
    mask = foreground_mask(vol)
    frac = mask.data.mean()
    assert 0.2 < frac < 0.9
    center = tuple(d // 2 for d in vol.grid.dims)
    assert mask.data[center]
