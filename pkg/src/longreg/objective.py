"""The full registration loss: all-pairs similarity through composed deformations,
three flow regularizers, and the additive per-session rigid adjustment."""

from dataclasses import dataclass

import numpy as np

from .config import RegistrationConfig
from .diffeo import compose_displacements, default_n_iter, exp_flow
from .grid import (
    GridSpec,
    ImageSeries,
    VectorField,
    Volume,
    identity_positions,
    trilinear_gather,
)
from .similarity import silncc


@dataclass
class RigidParams:
    """Six-parameter rigid adjustment: intrinsic Z-Y-X Euler angles and a translation.

    angles = (about-z, about-y, about-x) in radians, applied in that order about
    the volume center; translation in voxel units. The first session of a series
    is always pinned to the identity.
    """

    angles: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.angles)) and np.all(np.isfinite(self.translation))):
            raise ValueError("rigid parameters must be finite")

    @classmethod
    def identity(cls) -> "RigidParams":
        return cls(np.zeros(3), np.zeros(3))


def rotation_and_derivatives(angles: np.ndarray):
    """Rotation matrix Rz@Ry@Rx plus its derivative with respect to each angle."""
    az, ay, ax = angles
    cz, sz = np.cos(az), np.sin(az)
    cy, sy = np.cos(ay), np.sin(ay)
    cx, sx = np.cos(ax), np.sin(ax)
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1.0]])
    ry = np.array([[cy, 0, sy], [0, 1.0, 0], [-sy, 0, cy]])
    rx = np.array([[1.0, 0, 0], [0, cx, -sx], [0, sx, cx]])
    dz = np.array([[-sz, -cz, 0], [cz, -sz, 0], [0, 0, 0.0]])
    dy = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    dx = np.array([[0, 0, 0], [0, -sx, -cx], [0, cx, -sx]])
    rot = rz @ ry @ rx
    derivs = (dz @ ry @ rx, rz @ dy @ rx, rz @ ry @ dx)
    return rot, derivs


def rigid_displacement(params: RigidParams, grid: GridSpec) -> VectorField:
    """Displacement u(x) = R (x - c) + c + t - x about the volume center c."""
    rot, _ = rotation_and_derivatives(params.angles)
    pos = identity_positions(grid.dims)
    center = (np.asarray(grid.dims, dtype=np.float64) - 1.0) / 2.0
    rel = pos - center
    u = rel @ rot.T + center + params.translation - pos
    return VectorField(grid, u)


def rigid_param_vjp(grad_field: np.ndarray, params: RigidParams, dims) -> np.ndarray:
    """Project a gradient on the rigid displacement field onto the six parameters.

    Returns (d/d angles, d/d translation) concatenated as a length-6 vector.
    """
    _, derivs = rotation_and_derivatives(params.angles)
    pos = identity_positions(tuple(dims))
    center = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    rel = (pos - center).reshape(-1, 3)
    g = grad_field.reshape(-1, 3)
    out = np.empty(6)
    for m, d in enumerate(derivs):
        out[m] = np.sum(g * (rel @ d.T))
    out[3:] = g.sum(axis=0)
    return out


def total_deformation(nonlinear: VectorField, rigid: VectorField) -> VectorField:
    """Additive combination of the composed nonlinear displacement and the rigid one."""
    if nonlinear.grid != rigid.grid:
        raise ValueError("total_deformation: grids differ")
    return VectorField(nonlinear.grid, nonlinear.data + rigid.data)


@dataclass
class LossBreakdown:
    sim_total: float
    l_ss: float
    l_l2: float
    l_ts: float
    total: float
    pair_sim: np.ndarray  # (N, N), diagonal unused

    def to_dict(self) -> dict:
        return {
            "sim_total": self.sim_total,
            "l_ss": self.l_ss,
            "l_l2": self.l_l2,
            "l_ts": self.l_ts,
            "total": self.total,
            "pair_sim": self.pair_sim.tolist(),
        }


# ---------------------------------------------------------------------------
# Regularizers (value + adjoint on raw flow arrays)
# ---------------------------------------------------------------------------

def _gradient_adjoint_axis(g: np.ndarray, axis: int) -> np.ndarray:
    """Transpose of np.gradient along one axis at unit spacing."""
    gm = np.moveaxis(g, axis, 0)
    df = np.zeros_like(gm)
    if gm.shape[0] > 2:
        df[2:] += gm[1:-1] / 2.0
        df[:-2] -= gm[1:-1] / 2.0
    df[1] += gm[0]
    df[0] -= gm[0]
    df[-1] += gm[-1]
    df[-2] -= gm[-1]
    return np.moveaxis(df, 0, axis)


def _reg_spatial_raw(flows: list[np.ndarray], want_grad: bool):
    n_gaps = len(flows)
    value = 0.0
    grads = [np.zeros_like(f) for f in flows] if want_grad else None
    for g_idx, f in enumerate(flows):
        nvox = f[..., 0].size
        w = 1.0 / (n_gaps * nvox)
        for c in range(3):
            d = np.gradient(f[..., c], axis=(0, 1, 2))
            for a in range(3):
                value += w * np.sum(d[a] ** 2)
                if want_grad:
                    grads[g_idx][..., c] += _gradient_adjoint_axis(2.0 * w * d[a], a)
    return value, grads


def _reg_l2_raw(flows: list[np.ndarray], want_grad: bool):
    n_gaps = len(flows)
    value = 0.0
    grads = [np.zeros_like(f) for f in flows] if want_grad else None
    for g_idx, f in enumerate(flows):
        nvox = f[..., 0].size
        w = 1.0 / (n_gaps * nvox)
        value += w * np.sum(f**2)
        if want_grad:
            grads[g_idx] += 2.0 * w * f
    return value, grads


def _reg_temporal_raw(flows: list[np.ndarray], times: list[float], want_grad: bool):
    n_gaps = len(flows)
    grads = [np.zeros_like(f) for f in flows] if want_grad else None
    if n_gaps < 2:
        return 0.0, grads
    dts = [times[g + 1] - times[g] for g in range(n_gaps)]
    nvox = flows[0][..., 0].size
    w = 1.0 / ((n_gaps - 1) * nvox)
    value = 0.0
    for g in range(1, n_gaps):
        diff = flows[g - 1] / dts[g - 1] - flows[g] / dts[g]
        value += w * np.sum(diff**2)
        if want_grad:
            grads[g - 1] += 2.0 * w * diff / dts[g - 1]
            grads[g] -= 2.0 * w * diff / dts[g]
    return value, grads


def reg_spatial(gap_flows: list[VectorField]) -> float:
    """Mean squared Frobenius norm of the flow Jacobians, averaged over gaps."""
    value, _ = _reg_spatial_raw([f.data for f in gap_flows], want_grad=False)
    return value


def reg_l2(gap_flows: list[VectorField]) -> float:
    """Mean squared flow magnitude, averaged over gaps."""
    value, _ = _reg_l2_raw([f.data for f in gap_flows], want_grad=False)
    return value


def reg_temporal(gap_flows: list[VectorField], times: list[float]) -> float:
    """Penalty on the change of time-normalized flow between consecutive gaps.

    Both flows are oriented forward in time, so motion proportional to the
    elapsed time between sessions incurs no penalty. Zero by convention for
    fewer than three sessions.
    """
    if any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
        raise ValueError("times must be strictly increasing")
    value, _ = _reg_temporal_raw([f.data for f in gap_flows], times, want_grad=False)
    return value


# ---------------------------------------------------------------------------
# All-pairs similarity
# ---------------------------------------------------------------------------

def standardized_images(series: ImageSeries) -> list[np.ndarray]:
    """Each session image divided by its global standard deviation.

    Makes the similarity invariant to per-session affine intensity rescaling;
    a constant image is passed through unchanged.
    """
    out = []
    for img in series.images:
        s = float(img.data.std())
        out.append(img.data / s if s > 0 else img.data.copy())
    return out


def _gap_deformations(gap_flows: list[VectorField], n_iter: int | None):
    fwd, inv = [], []
    for f in gap_flows:
        n = default_n_iter(f.data) if n_iter is None else n_iter
        fwd.append(exp_flow(f, n))
        inv.append(exp_flow(VectorField(f.grid, -f.data), n))
    return fwd, inv


def all_pairs_similarity(
    series: ImageSeries,
    gap_flows: list[VectorField],
    rigid: list[RigidParams],
    cfg: RegistrationConfig,
) -> LossBreakdown:
    """Sum of SiLNCC over every ordered session pair, moving image warped onto the
    reference grid through the composed chain of gap deformations plus the moving
    session's rigid displacement. Regularizer slots are left at zero.
    """
    n = len(series)
    if n < 2:
        raise ValueError("need at least two sessions")
    if len(gap_flows) != n - 1:
        raise ValueError(f"expected {n - 1} gap flows, got {len(gap_flows)}")
    if len(rigid) != n:
        raise ValueError(f"expected {n} rigid parameter sets, got {len(rigid)}")

    grid = series.images[0].grid
    imgs = standardized_images(series)
    fwd, inv = _gap_deformations(gap_flows, cfg.exp_n_iter)
    ident = identity_positions(grid.dims)
    rigid_fields = [rigid_displacement(r, grid).data for r in rigid]

    pair = np.zeros((n, n))
    for i in range(n):
        ref = Volume(grid, imgs[i])
        # ascending chain: pull sessions j > i onto grid i through forward gaps
        chain = None
        for j in range(i + 1, n):
            chain = VectorField(grid, fwd[j - 1].data.copy()) if chain is None else compose_displacements(chain, fwd[j - 1])
            pair[i, j] = _pair_sim(ref, imgs[j], chain.data + rigid_fields[j], ident, cfg)
        # descending chain: pull sessions j < i onto grid i through inverted gaps
        chain = None
        for j in range(i - 1, -1, -1):
            chain = VectorField(grid, inv[j].data.copy()) if chain is None else compose_displacements(chain, inv[j])
            pair[i, j] = _pair_sim(ref, imgs[j], chain.data + rigid_fields[j], ident, cfg)

    sim_total = float(pair.sum())
    return LossBreakdown(sim_total, 0.0, 0.0, 0.0, sim_total, pair)


def _pair_sim(ref, moving_data, total_disp, ident, cfg) -> float:
    warped = trilinear_gather(moving_data, ident + total_disp)
    loss, _ = silncc(ref, Volume(ref.grid, warped), cfg.window_radius, cfg.eps_scale)
    return loss


def evaluate_total(
    series: ImageSeries,
    gap_flows: list[VectorField],
    rigid: list[RigidParams],
    cfg: RegistrationConfig,
) -> LossBreakdown:
    """Similarity plus weighted regularizers; the breakdown identity holds exactly."""
    bd = all_pairs_similarity(series, gap_flows, rigid, cfg)
    flows_raw = [f.data for f in gap_flows]
    times = cfg.times if cfg.times is not None else series.times
    l_ss, _ = _reg_spatial_raw(flows_raw, want_grad=False)
    l_l2, _ = _reg_l2_raw(flows_raw, want_grad=False)
    l_ts, _ = _reg_temporal_raw(flows_raw, times, want_grad=False)
    total = bd.sim_total + cfg.alpha_ss * l_ss + cfg.alpha_l2 * l_l2 + cfg.alpha_ts * l_ts
    return LossBreakdown(bd.sim_total, l_ss, l_l2, l_ts, total, bd.pair_sim)
