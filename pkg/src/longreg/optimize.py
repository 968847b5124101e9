"""Exact reverse-mode gradients of the registration loss, Adam with a
warmup-cosine schedule, and the three-stage multi-resolution driver.

The optimized parameters are the N-1 coarse-grid gap flows plus six rigid
parameters per session (the first session stays pinned). One loss evaluation
runs the whole forward pipeline -- upsample, spectral smoothing, scaling and
squaring, chain composition, rigid adjustment, warping, windowed similarity,
regularizers -- and the backward pass walks the same tape in reverse, so the
gradients are exact up to floating point.
"""

from dataclasses import dataclass, field

import numpy as np

from .config import RegistrationConfig, StageSpec
from .diffeo import default_n_iter, exp_flow_tape, exp_flow_vjp
from .grid import (
    GridSpec,
    ImageSeries,
    VectorField,
    Volume,
    downsample,
    downsample_grid,
    identity_positions,
    jacobian_det,
    trilinear_gather,
    trilinear_pos_vjp,
    trilinear_scatter,
    upsample_field,
    upsample_field_vjp,
)
from .objective import (
    LossBreakdown,
    RigidParams,
    _reg_l2_raw,
    _reg_spatial_raw,
    _reg_temporal_raw,
    rigid_displacement,
    rigid_param_vjp,
    standardized_images,
)
from .similarity import silncc_value_and_grad
from .synth import smooth_sigma_vox


class DivergenceError(RuntimeError):
    """Raised when a loss term stops being finite; carries the offending term name."""

    def __init__(self, term: str, trace=None):
        super().__init__(f"non-finite loss in term '{term}'")
        self.term = term
        self.trace = trace


@dataclass
class RegistrationParams:
    """Optimizable state: coarse gap flows (own grid) and per-session rigid rows.

    rigid is (N, 6): three intrinsic Z-Y-X Euler angles then three voxel
    translations per session; row 0 is held at identity.
    """

    gap_flows: list[VectorField]
    rigid: np.ndarray

    def rigid_params(self) -> list[RigidParams]:
        return [RigidParams(r[:3], r[3:]) for r in self.rigid]


@dataclass
class _StageProblem:
    imgs: list[np.ndarray]        # standardized stage-resolution images
    img_grid: GridSpec
    flow_grid: GridSpec
    times: list[float]
    cfg: RegistrationConfig


def _check_finite(value: float, term: str):
    if not np.isfinite(value):
        raise DivergenceError(term)


def _stage_flows(problem: _StageProblem, flows: list[np.ndarray]):
    """Coarse parameters to stage-resolution smoothed flows; returns fields and a pullback."""
    cfg = problem.cfg
    phis = []
    for theta in flows:
        up = upsample_field(VectorField(problem.flow_grid, theta), problem.img_grid)
        phis.append(smooth_sigma_vox(up.data, cfg.flow_smooth_sigma_vox))

    def pullback(grad_phi: np.ndarray) -> np.ndarray:
        g = smooth_sigma_vox(grad_phi, cfg.flow_smooth_sigma_vox)  # self-adjoint
        return upsample_field_vjp(g, problem.flow_grid, problem.img_grid)

    return phis, pullback


def loss_and_grad_raw(problem: _StageProblem, flows: list[np.ndarray], rigid: np.ndarray):
    """Loss breakdown plus exact gradients for the coarse flows and rigid rows."""
    cfg = problem.cfg
    imgs = problem.imgs
    n = len(imgs)
    dims = problem.img_grid.dims
    ident = identity_positions(dims)

    phis, pullback = _stage_flows(problem, flows)

    # exponentials of +/- each smoothed flow, with tapes for the backward pass
    exp_n = [default_n_iter(p) if cfg.exp_n_iter is None else cfg.exp_n_iter for p in phis]
    fwd, fwd_tapes, inv, inv_tapes = [], [], [], []
    for p, nn in zip(phis, exp_n):
        d, tape = exp_flow_tape(p, nn)
        fwd.append(d)
        fwd_tapes.append(tape)
        d, tape = exp_flow_tape(-p, nn)
        inv.append(d)
        inv_tapes.append(tape)

    rigid_fields = [rigid_displacement(RigidParams(r[:3], r[3:]), problem.img_grid).data for r in rigid]
    eps = [cfg.eps_scale * float(im.var()) for im in imgs]

    pair = np.zeros((n, n))
    g_fwd = [np.zeros_like(d) for d in fwd]
    g_inv = [np.zeros_like(d) for d in inv]
    g_rigid_field = [np.zeros(dims + (3,)) for _ in range(n)]

    def pair_loss_and_gT(i: int, j: int, chain_u: np.ndarray):
        """SiLNCC of pair (i, j) and the gradient w.r.t. the total displacement."""
        pos = ident + chain_u + rigid_fields[j]
        warped = trilinear_gather(imgs[j], pos)
        value, g_w = silncc_value_and_grad(imgs[i], warped, cfg.window_radius, eps[i])
        _check_finite(value, f"sim({i},{j})")
        g_t = trilinear_pos_vjp(imgs[j], pos, g_w)
        return value, g_t

    for i in range(n):
        for ascending in (True, False):
            js = range(i + 1, n) if ascending else range(i - 1, -1, -1)
            gaps = fwd if ascending else inv
            gap_of = (lambda j: j - 1) if ascending else (lambda j: j)
            states: dict[int, np.ndarray] = {}
            g_ts: dict[int, np.ndarray] = {}
            u = None
            prev_j = None
            for j in js:
                g = gap_of(j)
                u = gaps[g].copy() if u is None else u + trilinear_gather(gaps[g], ident + states[prev_j])
                states[j] = u
                pair[i, j], g_ts[j] = pair_loss_and_gT(i, j, u)
                g_rigid_field[j] += g_ts[j]
                prev_j = j
            # walk the chain backwards, folding each pair's gradient in where it entered
            g_u = None
            g_gaps = g_fwd if ascending else g_inv
            for j in reversed(list(js)):
                g_u = g_ts[j] if g_u is None else g_u + g_ts[j]
                g = gap_of(j)
                back = j - 1 if ascending else j + 1
                if back in states:  # this step extended the previous chain state
                    pos = ident + states[back]
                    g_gaps[g] += trilinear_scatter(g_u, pos, dims)
                    g_u = g_u + trilinear_pos_vjp(gaps[g], pos, g_u)
                else:  # first link: u was the gap field itself
                    g_gaps[g] += g_u

    sim_total = float(pair.sum())

    # regularizers act on the smoothed stage-resolution flows
    l_ss, g_ss = _reg_spatial_raw(phis, want_grad=True)
    l_l2, g_l2 = _reg_l2_raw(phis, want_grad=True)
    l_ts, g_ts_reg = _reg_temporal_raw(phis, problem.times, want_grad=True)
    for term, value in (("l_ss", l_ss), ("l_l2", l_l2), ("l_ts", l_ts)):
        _check_finite(value, term)
    total = sim_total + cfg.alpha_ss * l_ss + cfg.alpha_l2 * l_l2 + cfg.alpha_ts * l_ts

    # pull everything back to the coarse flow parameters
    grad_flows = []
    for g in range(n - 1):
        g_phi = exp_flow_vjp(fwd_tapes[g], g_fwd[g]) - exp_flow_vjp(inv_tapes[g], g_inv[g])
        g_phi += cfg.alpha_ss * g_ss[g] + cfg.alpha_l2 * g_l2[g] + cfg.alpha_ts * g_ts_reg[g]
        grad_flows.append(pullback(g_phi))

    grad_rigid = np.zeros_like(rigid)
    for j in range(1, n):  # session 0 stays identity
        grad_rigid[j] = rigid_param_vjp(g_rigid_field[j], RigidParams(rigid[j, :3], rigid[j, 3:]), dims)

    breakdown = LossBreakdown(sim_total, l_ss, l_l2, l_ts, total, pair)
    return breakdown, grad_flows, grad_rigid


def loss_and_grad(params: RegistrationParams, series: ImageSeries, cfg: RegistrationConfig):
    """Public entry: evaluate the full loss and its exact gradients at native resolution."""
    if len(series) < 2:
        raise ValueError("need at least two sessions")
    times = cfg.times if cfg.times is not None else series.times
    problem = _StageProblem(
        imgs=standardized_images(series),
        img_grid=series.images[0].grid,
        flow_grid=params.gap_flows[0].grid,
        times=times,
        cfg=cfg,
    )
    flows = [f.data for f in params.gap_flows]
    return loss_and_grad_raw(problem, flows, params.rigid)


# ---------------------------------------------------------------------------
# Adam and the learning-rate schedule
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8) -> "OptimState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(state: OptimState, params: list[np.ndarray], grads: list[np.ndarray], lr) -> list[np.ndarray]:
    """Bias-corrected Adam update; lr may be a scalar or one value per parameter array."""
    state.step += 1
    t = state.step
    lrs = [lr] * len(params) if np.isscalar(lr) else list(lr)
    state.lr = float(lrs[0])
    out = []
    for p, g, m, v, rate in zip(params, grads, state.m, state.v, lrs):
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g**2
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        out.append(p - rate * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def lr_at(iteration: int, n_iters: int, base_lr: float) -> float:
    """Linear warmup over the first 20% of iterations, then cosine decay to ~0."""
    warmup = 0.2 * n_iters
    if iteration < warmup:
        return base_lr * (iteration + 1) / warmup
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * (iteration - warmup) / (0.8 * n_iters)))


# ---------------------------------------------------------------------------
# Multi-resolution driver
# ---------------------------------------------------------------------------

def _flow_grid_for(full: GridSpec, flow_resolution: int) -> GridSpec:
    return downsample_grid(full, flow_resolution)


def _stage_series(series: ImageSeries, factor: int) -> list[Volume]:
    return [downsample(img, factor) for img in series.images]


@dataclass
class RegistrationResult:
    """Final gap flows (coarse grid), rigid rows, loss trace, and lazy deformations."""

    flow_params: list[VectorField]
    rigid: np.ndarray
    grid: GridSpec
    cfg: RegistrationConfig
    times: list[float]
    trace: list[dict] = field(default_factory=list)

    def gap_flow(self, g: int) -> VectorField:
        """Smoothed stage-resolution flow for gap g on the image grid."""
        up = upsample_field(self.flow_params[g], self.grid)
        return VectorField(self.grid, smooth_sigma_vox(up.data, self.cfg.flow_smooth_sigma_vox))

    def _gap_displacements(self, inverse: bool) -> list[VectorField]:
        out = []
        for g in range(len(self.flow_params)):
            phi = self.gap_flow(g).data
            if inverse:
                phi = -phi
            n = default_n_iter(phi) if self.cfg.exp_n_iter is None else self.cfg.exp_n_iter
            disp, _ = exp_flow_tape(phi, n)
            out.append(VectorField(self.grid, disp))
        return out

    def composed(self, frm: int, to: int) -> VectorField:
        """Total displacement pulling session `frm` onto the grid of session `to`."""
        from .diffeo import compose_chain

        gaps = self._gap_displacements(inverse=frm < to)
        u = compose_chain(gaps, frm, to)
        rigid_u = rigid_displacement(RigidParams(self.rigid[frm, :3], self.rigid[frm, 3:]), self.grid)
        return VectorField(self.grid, u.data + rigid_u.data)

    def jacobian_det_map(self, frm: int, to: int) -> Volume:
        return jacobian_det(self.composed(frm, to))


def register_series(series: ImageSeries, cfg: RegistrationConfig, trace_callback=None) -> RegistrationResult:
    """Run the staged registration and return flows, rigid parameters and the loss trace.

    Each stage downsamples the images, transfers the previous stage's flows onto
    the stage's coarse flow grid, and runs Adam with the warmup-cosine schedule.
    Deterministic for a fixed config: the initial state is zero and the loop has
    no random element.
    """
    n = len(series)
    if n < 2:
        raise ValueError("need at least two sessions")
    full_grid = series.images[0].grid
    times = cfg.times if cfg.times is not None else series.times

    flows: list[VectorField] | None = None
    rigid = np.zeros((n, 6))
    trace: list[dict] = []

    for s_idx, stage in enumerate(cfg.stages):
        stage_imgs = _stage_series(series, stage.image_downsample)
        img_grid = stage_imgs[0].grid
        flow_grid = _flow_grid_for(full_grid, stage.flow_resolution)
        if flows is None:
            flows = [VectorField(flow_grid, np.zeros(flow_grid.dims + (3,))) for _ in range(n - 1)]
        else:
            flows = [upsample_field(f, flow_grid) for f in flows]

        problem = _StageProblem(
            imgs=[im.data / s if (s := float(im.data.std())) > 0 else im.data.copy() for im in stage_imgs],
            img_grid=img_grid,
            flow_grid=flow_grid,
            times=times,
            cfg=cfg,
        )
        theta = [f.data for f in flows]
        state = OptimState.for_params(theta + [rigid], cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

        for it in range(stage.n_iters):
            try:
                bd, g_flows, g_rigid = loss_and_grad_raw(problem, theta, rigid)
            except DivergenceError as err:
                err.trace = trace
                raise
            lr_flow = lr_at(it, stage.n_iters, stage.base_lr)
            lr_rigid = lr_at(it, stage.n_iters, cfg.rigid_lr)
            updated = adam_step(state, theta + [rigid], g_flows + [g_rigid], [lr_flow] * (n - 1) + [lr_rigid])
            theta, rigid = updated[:-1], updated[-1]
            rigid[0] = 0.0
            row = {"stage": s_idx, "iter": it, "lr": lr_flow, **bd.to_dict()}
            del row["pair_sim"]
            trace.append(row)
            if trace_callback is not None:
                trace_callback(row)

        flows = [VectorField(flow_grid, t) for t in theta]

    return RegistrationResult(
        flow_params=flows,
        rigid=rigid,
        grid=full_grid,
        cfg=cfg,
        times=times,
        trace=trace,
    )
