"""Windowed similarity metrics for intensity-unstable image pairs.

Two losses over cubic windows: one minus the local normalized cross-correlation
(LNCC), and the local least-squares residual of regressing the moving image on
the reference (SiLNCC). The latter's expectation does not collapse in low-contrast
regions, which is why the registration objective uses it. The module also carries
the closed-form expectation of LNCC under a local linear intensity model and the
Monte-Carlo estimators that validate it.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grid import Volume

# lncc divides by window variances and needs a real guard; silncc only needs
# protection against 0/0 in exactly-flat windows, and a larger eps would leak a
# spurious residual into perfectly linearly-related images.
EPS_SCALE_LNCC = 1e-5
EPS_SCALE_SILNCC = 1e-12


def _box_sum(arr: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the (2r+1)^d window around each element, truncated at the borders."""
    kernel = np.ones(2 * radius + 1)
    out = arr
    for axis in range(arr.ndim):
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="constant", cval=0.0)
    return out


def _box_counts(shape: tuple[int, ...], radius: int) -> np.ndarray:
    return _box_sum(np.ones(shape), radius)


@dataclass
class WindowStats:
    """Per-voxel centered window sums for an image pair over radius-r cubes."""

    radius: int
    counts: np.ndarray  # |R| per center (truncated windows at the borders)
    saa: np.ndarray     # sum of centered reference squared
    sbb: np.ndarray     # sum of centered moving squared
    sab: np.ndarray     # centered cross sum
    mean_a: np.ndarray
    mean_b: np.ndarray


def window_stats(a: np.ndarray, b: np.ndarray, radius: int) -> WindowStats:
    """Centered window sums via separable moving sums (one pass per axis)."""
    if radius < 1:
        raise ValueError(f"window radius must be >= 1, got {radius}")
    counts = _box_counts(a.shape, radius)
    sa = _box_sum(a, radius)
    sb = _box_sum(b, radius)
    mean_a = sa / counts
    mean_b = sb / counts
    saa = _box_sum(a * a, radius) - sa * mean_a
    sbb = _box_sum(b * b, radius) - sb * mean_b
    sab = _box_sum(a * b, radius) - sa * mean_b
    return WindowStats(radius, counts, saa, sbb, sab, mean_a, mean_b)


def _eps_for(a: np.ndarray, eps_scale: float) -> float:
    # the floor keeps sums-cancellation dust in flat references from blowing up
    # the regression ratio when the image variance itself is exactly zero
    floor = 1e-20 * float(np.mean(a**2)) + np.finfo(np.float64).tiny
    return float(max(eps_scale * a.var(), floor))


def lncc(a: Volume, b: Volume, radius: int = 1, eps_scale: float = EPS_SCALE_LNCC):
    """One minus windowed normalized cross-correlation; returns (mean loss, per-region map)."""
    if a.grid != b.grid:
        raise ValueError("lncc: image grids differ")
    eps = _eps_for(a.data, eps_scale)
    st = window_stats(a.data, b.data, radius)
    per_region = 1.0 - st.sab / np.sqrt((st.saa + eps) * (st.sbb + eps))
    return float(per_region.mean()), Volume(a.grid, per_region)


def silncc(a: Volume, b: Volume, radius: int = 1, eps_scale: float = EPS_SCALE_SILNCC):
    """Windowed least-squares residual of regressing `b` on `a`; (mean loss, per-region map).

    `a` is the reference whose variance sits in the denominator; the metric is
    invariant to affine intensity changes of `a` and scales quadratically with `b`.
    """
    if a.grid != b.grid:
        raise ValueError("silncc: image grids differ")
    eps = _eps_for(a.data, eps_scale)
    st = window_stats(a.data, b.data, radius)
    per_region = (st.sbb - st.sab**2 / (st.saa + eps)) / st.counts
    return float(per_region.mean()), Volume(a.grid, per_region)


def silncc_value_and_grad(a: np.ndarray, b: np.ndarray, radius: int, eps: float):
    """Mean SiLNCC over regions and its exact gradient with respect to `b`.

    Every voxel y participates in all windows containing it, so the gradient is a
    handful of box sums over per-window quantities:
        dL/db(y) = (2/V) [ b K - Box(p m_b) - a Box(p beta) + Box(p beta m_a) ]
    with p = 1/|R|, beta = Sab/(Saa+eps) and K = Box(p).
    """
    st = window_stats(a, b, radius)
    per_region = (st.sbb - st.sab**2 / (st.saa + eps)) / st.counts
    value = float(per_region.mean())
    nvox = a.size
    p = 1.0 / st.counts
    beta = st.sab / (st.saa + eps)
    grad = (
        b * _box_sum(p, radius)
        - _box_sum(p * st.mean_b, radius)
        - a * _box_sum(p * beta, radius)
        + _box_sum(p * beta * st.mean_a, radius)
    )
    grad *= 2.0 / nvox
    return value, grad


# ---------------------------------------------------------------------------
# Expected LNCC under the local linear intensity model, plus Monte Carlo checks
# ---------------------------------------------------------------------------

def expected_lncc(cnr: float, a_r: float) -> float:
    """Closed-form expectation of the per-region LNCC loss at a given CNR and local slope."""
    if cnr <= 0:
        raise ValueError(f"cnr must be positive, got {cnr}")
    return 1.0 - 1.0 / np.sqrt(1.0 + 1.0 / (a_r**2 * cnr**2))


def _lncc_region_samples(rng, cnr: float, a_r: float, region_size: int, n_samples: int) -> np.ndarray:
    """Per-sample LNCC over one window: unit-variance signal plus a linear noisy observation.

    The signal is renormalized to exactly unit within-window (ML) variance. The
    noise draw is scaled by sqrt(R/(R-1)) so its centered within-window power
    averages sigma^2 = (1/cnr)^2, which is the quantity the closed-form
    expectation compares the signal variance against.
    """
    x = rng.standard_normal((n_samples, region_size))
    x -= x.mean(axis=1, keepdims=True)
    x /= np.sqrt((x**2).mean(axis=1, keepdims=True))
    sigma = 0.0 if np.isinf(cnr) else (1.0 / cnr) * np.sqrt(region_size / (region_size - 1))
    b_r = rng.standard_normal((n_samples, 1))
    y = a_r * x + b_r + (sigma * rng.standard_normal((n_samples, region_size)) if sigma else 0.0)
    yc = y - y.mean(axis=1, keepdims=True)
    sab = (x * yc).sum(axis=1)
    saa = (x**2).sum(axis=1)
    sbb = (yc**2).sum(axis=1)
    return 1.0 - sab / np.sqrt(saa * sbb)


def mc_lncc_expectation(cnr_grid, a_r: float, region_size: int, n_samples: int, seed: int) -> list[dict]:
    """Monte-Carlo estimate of the expected per-region LNCC against the closed form.

    Rows: cnr, mean, sem, analytic, residual. region_size is the voxel count |R|
    of one window (9 for a 3x3 patch, 27 for 3x3x3).
    """
    if region_size < 2:
        raise ValueError("region_size must be >= 2")
    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    rng = np.random.default_rng(seed)
    rows = []
    for cnr in cnr_grid:
        vals = _lncc_region_samples(rng, float(cnr), a_r, region_size, n_samples)
        mean = float(vals.mean())
        analytic = float(expected_lncc(float(cnr), a_r))
        rows.append(
            {
                "cnr": float(cnr),
                "mean": mean,
                "sem": float(vals.std(ddof=1) / np.sqrt(n_samples)),
                "analytic": analytic,
                "residual": mean - analytic,
            }
        )
    return rows


def _metric_1d(metric: str, a: np.ndarray, b: np.ndarray, radius: int, eps_scale: float) -> float:
    """LNCC/SiLNCC mean loss over a 1D signal pair with truncated windows."""
    kernel = np.ones(2 * radius + 1)
    box = lambda arr: ndimage.correlate1d(arr, kernel, mode="constant", cval=0.0)
    counts = box(np.ones_like(a))
    eps = _eps_for(a, eps_scale)
    sa, sb = box(a), box(b)
    saa = box(a * a) - sa * sa / counts
    sbb = box(b * b) - sb * sb / counts
    sab = box(a * b) - sa * sb / counts
    if metric == "lncc":
        per = 1.0 - sab / np.sqrt((saa + eps) * (sbb + eps))
    else:
        per = (sbb - sab**2 / (saa + eps)) / counts
    return float(per.mean())


def mc_offset_landscape(
    metric: str,
    cnr_grid,
    offset_grid,
    n_samples: int,
    seed: int,
    length: int | None = None,
    radius: int = 4,
) -> list[dict]:
    """Mean metric loss between two noisy 1D step signals per (cnr, offset) cell.

    The reference edge sits between index radius-1 and radius and the default
    signal length is 2*radius, so every truncated window straddles it; the
    second signal's edge is shifted by `offset` voxels. Signal amplitude scales
    with CNR at unit noise (at infinite CNR the noise is dropped instead).
    Rows: cnr, offset, mean, sem.
    """
    if metric not in ("lncc", "silncc"):
        raise ValueError(f"metric must be 'lncc' or 'silncc', got {metric!r}")
    if length is None:
        length = 2 * radius
    rng = np.random.default_rng(seed)
    x = np.arange(length)
    rows = []
    for cnr in cnr_grid:
        if np.isinf(cnr):
            height, sigma = 2.0, 0.0
        else:
            height, sigma = 2.0 * float(cnr), 1.0  # step std is height/2 at unit noise
        for offset in offset_grid:
            sig_a = np.where(x >= radius, height / 2.0, -height / 2.0)
            sig_b = np.where(x >= radius + offset, height / 2.0, -height / 2.0)
            eps_scale = EPS_SCALE_LNCC if metric == "lncc" else EPS_SCALE_SILNCC
            vals = np.empty(n_samples)
            for s in range(n_samples):
                a = sig_a + sigma * rng.standard_normal(length)
                b = sig_b + sigma * rng.standard_normal(length)
                vals[s] = _metric_1d(metric, a, b, radius, eps_scale)
            rows.append(
                {
                    "cnr": float(cnr),
                    "offset": float(offset),
                    "mean": float(vals.mean()),
                    "sem": float(vals.std(ddof=1) / np.sqrt(n_samples)),
                }
            )
    return rows
