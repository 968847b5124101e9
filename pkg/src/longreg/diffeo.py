"""Exponentiation of stationary velocity fields and composition of deformations.

A velocity field integrates to a diffeomorphic deformation by halving it n times
and self-composing n times. Self-composition always uses the additive form
u <- u + u(x + u), which keeps clamped boundary samples from dragging the
interior, and the inverse deformation is the exponential of the negated field.
"""

from typing import Sequence

import numpy as np

from .grid import (
    VectorField,
    identity_positions,
    trilinear_gather,
    trilinear_pos_vjp,
    trilinear_scatter,
)

N_ITER_MIN = 4
N_ITER_MAX = 10
STEP_MAX_VOX = 0.5


def default_n_iter(flow_data: np.ndarray) -> int:
    """Smallest iteration count keeping the halved field below half a voxel, in [4, 10]."""
    mag = float(np.sqrt((flow_data**2).sum(axis=-1)).max())
    n = 0 if mag <= STEP_MAX_VOX else int(np.ceil(np.log2(mag / STEP_MAX_VOX)))
    return int(np.clip(n, N_ITER_MIN, N_ITER_MAX))


def _exp_forward(flow_data: np.ndarray, n_iter: int, keep_tape: bool):
    if n_iter < 1:
        raise ValueError(f"n_iter must be >= 1, got {n_iter}")
    ident = identity_positions(flow_data.shape[:3])
    u = flow_data / (2.0**n_iter)
    tape = []
    for _ in range(n_iter):
        if keep_tape:
            tape.append(u)
        u = u + trilinear_gather(u, ident + u)
    return u, tape


def exp_flow(flow: VectorField, n_iter: int | None = None) -> VectorField:
    """Displacement of the deformation x -> x + u(x) approximating the flow's exponential."""
    n = default_n_iter(flow.data) if n_iter is None else n_iter
    u, _ = _exp_forward(flow.data, n, keep_tape=False)
    return VectorField(flow.grid, u)


def invert_flow_exp(flow: VectorField, n_iter: int | None = None) -> VectorField:
    """Displacement of the inverse deformation: the exponential of the negated flow."""
    n = default_n_iter(flow.data) if n_iter is None else n_iter
    return exp_flow(VectorField(flow.grid, -flow.data), n)


def exp_flow_tape(flow_data: np.ndarray, n_iter: int):
    """Raw-array exponential that also returns the per-step fields needed for the adjoint."""
    u, tape = _exp_forward(flow_data, n_iter, keep_tape=True)
    return u, tape


def exp_flow_vjp(tape: list[np.ndarray], grad_disp: np.ndarray) -> np.ndarray:
    """Backpropagate a gradient on the displacement through every squaring step.

    Each step was u' = u + u(x + u); u enters as the identity term, as the
    gathered field and through the sample positions, so all three contributions
    accumulate. Returns the gradient with respect to the input flow.
    """
    ident = identity_positions(tape[0].shape[:3])
    g = grad_disp
    for u in reversed(tape):
        pos = ident + u
        g = g + trilinear_scatter(g, pos, u.shape[:3]) + trilinear_pos_vjp(u, pos, g)
    return g / (2.0 ** len(tape))


def compose_displacements(first: VectorField, then: VectorField) -> VectorField:
    """Displacement of applying `first`, then `then`: u = u_first + u_then(x + u_first)."""
    if first.grid != then.grid:
        raise ValueError("compose_displacements: grids differ")
    ident = identity_positions(first.grid.dims)
    u = first.data + trilinear_gather(then.data, ident + first.data)
    return VectorField(first.grid, u)


def compose_chain(gap_displacements: Sequence[VectorField], frm: int, to: int) -> VectorField:
    """Displacement pulling session `frm` onto the grid of session `to` (0-based).

    For frm > to the list must hold forward gap deformations (entry g pulls
    session g+1 onto session g); for frm < to it must hold the inverted gaps
    (entry g pulls session g onto session g+1). Accumulation interpolates each
    next gap at the currently composed positions.
    """
    if len(gap_displacements) == 0:
        raise ValueError("compose_chain: empty gap list")
    if frm == to:
        raise ValueError("compose_chain: from and to sessions are equal")
    n_sessions = len(gap_displacements) + 1
    for name, s in (("from", frm), ("to", to)):
        if not 0 <= s < n_sessions:
            raise IndexError(f"compose_chain: session index {name}={s} out of range 0..{n_sessions - 1}")

    if frm > to:
        indices = range(to, frm)
    else:
        indices = range(to - 1, frm - 1, -1)
    result = None
    for g in indices:
        gap = gap_displacements[g]
        if result is None:
            result = VectorField(gap.grid, gap.data.copy())
        else:
            result = compose_displacements(result, gap)
    return result
