"""Ground-truth comparison metrics for displacement fields: Euclidean distance,
vector Pearson correlation, and the affine regression bias slope."""

import warnings

import numpy as np
from scipy import ndimage

from .grid import Mask, VectorField, Volume


def _roi_values(field: VectorField, roi: Mask) -> np.ndarray:
    if field.grid != roi.grid:
        raise ValueError("field and mask grids differ")
    return field.data[roi.data]


def eu_distance(truth: VectorField, est: VectorField, roi: Mask) -> float:
    """Mean Euclidean distance between the fields over the ROI, in mm."""
    if truth.grid != est.grid:
        raise ValueError("truth and estimate grids differ")
    t = _roi_values(truth, roi)
    e = _roi_values(est, roi)
    if t.shape[0] == 0:
        raise ValueError("ROI is empty")
    diff = (t - e) * np.asarray(truth.grid.spacing)
    return float(np.sqrt((diff**2).sum(axis=1)).mean())


def vector_pcc(truth: VectorField, est: VectorField, roi: Mask) -> float:
    """Pearson correlation generalized to vectors: mean-centered summed dot products."""
    if truth.grid != est.grid:
        raise ValueError("truth and estimate grids differ")
    t = _roi_values(truth, roi)
    e = _roi_values(est, roi)
    if t.shape[0] == 0:
        raise ValueError("ROI is empty")
    tc = t - t.mean(axis=0)
    ec = e - e.mean(axis=0)
    denom = np.sqrt((tc * tc).sum()) * np.sqrt((ec * ec).sum())
    if denom == 0:
        raise ValueError("vector_pcc undefined: a field is constant over the ROI")
    return float((tc * ec).sum() / denom)


def bias_slope(truth: VectorField, est: VectorField, roi: Mask):
    """Least-squares fit est = A @ truth + b over the ROI; returns (B, A, b).

    B is the mean diagonal of A: 1 means unbiased, below 1 the estimate
    underestimates the deformation. Raises when the truth covariance is rank
    deficient, naming the deficient directions.
    """
    if truth.grid != est.grid:
        raise ValueError("truth and estimate grids differ")
    t = _roi_values(truth, roi)
    e = _roi_values(est, roi)
    n = t.shape[0]
    if n < 4:
        raise ValueError("ROI too small for an affine fit")

    cov = np.cov(t.T)
    eigvals, eigvecs = np.linalg.eigh(cov)
    scale = max(eigvals.max(), np.finfo(np.float64).tiny)
    deficient = [i for i, v in enumerate(eigvals) if v / scale < 1e-12]
    if deficient:
        dirs = ", ".join(np.array2string(eigvecs[:, i], precision=3) for i in deficient)
        raise ValueError(f"truth covariance is rank deficient along direction(s) {dirs}")
    if eigvals.max() / eigvals.min() > 1e8:
        warnings.warn("truth covariance condition number exceeds 1e8; fit may be unstable")

    design = np.concatenate([t, np.ones((n, 1))], axis=1)  # (n, 4)
    m = design.T @ design
    rhs = design.T @ e
    sol = np.linalg.solve(m, rhs)  # (4, 3), columns are est components
    a = sol[:3].T
    b = sol[3]
    return float(np.trace(a) / 3.0), a, b


def foreground_mask(vol: Volume, threshold_frac: float = 0.1, closing_iters: int = 2) -> Mask:
    """Voxels above a fraction of the maximum intensity, morphologically closed."""
    raw = vol.data > threshold_frac * vol.data.max()
    closed = ndimage.binary_closing(raw, iterations=closing_iters)
    return Mask(vol.grid, closed)
