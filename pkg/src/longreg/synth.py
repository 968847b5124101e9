"""Synthetic ground-truth generation: spectral Gaussian smoothing, spatiotemporal
noise flows, semi-Lagrangian integration, and corrupted phantom time series."""

from dataclasses import asdict, dataclass

import numpy as np

from .grid import (
    GridSpec,
    Volume,
    VectorField,
    identity_positions,
    jacobian_det,
    trilinear_gather,
)


# ---------------------------------------------------------------------------
# Spectral Gaussian smoothing
# ---------------------------------------------------------------------------

def _fft_gaussian(data: np.ndarray, axes: tuple[int, ...], cutoffs, spacings) -> np.ndarray:
    """Multiply the spectrum along `axes` by exp(-0.5 (f / fc)^2) per axis.

    f is in cycles per the unit of the matching `spacings` entry. Periodic
    boundary, unit DC gain, self-adjoint as a linear operator.
    """
    spec = np.fft.rfftn(data, axes=axes)
    for axis, fc, d in zip(axes, cutoffs, spacings):
        n = data.shape[axis]
        f = np.fft.rfftfreq(n, d) if axis == axes[-1] else np.fft.fftfreq(n, d)
        shape = [1] * spec.ndim
        shape[axis] = f.size
        spec *= np.exp(-0.5 * (f / fc) ** 2).reshape(shape)
    return np.fft.irfftn(spec, s=[data.shape[a] for a in axes], axes=axes)


def gaussian_smooth_fft(obj, omega_s):
    """Low-pass a Volume or VectorField with the transfer function exp(-0.5 (f/omega_s)^2).

    omega_s: positive cutoff in cycles/mm, scalar or per-axis triple. Component
    fields are filtered independently. Boundaries are periodic (FFT).
    """
    fc = np.broadcast_to(np.asarray(omega_s, dtype=np.float64), (3,))
    if np.any(fc <= 0):
        raise ValueError(f"omega_s must be positive, got {omega_s}")
    spacing = obj.grid.spacing
    if isinstance(obj, Volume):
        return Volume(obj.grid, _fft_gaussian(obj.data, (0, 1, 2), fc, spacing))
    out = np.empty_like(obj.data)
    for c in range(3):
        out[..., c] = _fft_gaussian(obj.data[..., c], (0, 1, 2), fc, spacing)
    return VectorField(obj.grid, out)


def smooth_sigma_vox(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Periodic Gaussian smoothing with standard deviation `sigma` in voxels.

    Operates on raw (nx, ny, nz) or (nx, ny, nz, 3) arrays; grid spacing is
    irrelevant because sigma is grid-native. Equivalent cutoff: 1/(2 pi sigma).
    """
    if sigma <= 0:
        return np.array(arr, dtype=np.float64, copy=True)
    fc = [1.0 / (2.0 * np.pi * sigma)] * 3
    if arr.ndim == 3:
        return _fft_gaussian(arr, (0, 1, 2), fc, (1.0, 1.0, 1.0))
    out = np.empty_like(arr, dtype=np.float64)
    for c in range(arr.shape[-1]):
        out[..., c] = _fft_gaussian(arr[..., c], (0, 1, 2), fc, (1.0, 1.0, 1.0))
    return out


# ---------------------------------------------------------------------------
# Random flows and their integration
# ---------------------------------------------------------------------------

def gen_flow(
    dims,
    spacing,
    n_steps: int,
    omega_s: float,
    omega_t: float,
    sigma_v: float,
    seed: int,
) -> list[VectorField]:
    """Time-indexed random velocity fields: smoothed white noise, rescaled to sigma_v.

    Per component, i.i.d. standard-normal noise of shape (n_steps,) + dims is
    low-passed at omega_s (cycles/mm) spatially and omega_t (cycles/step)
    temporally, then all components are rescaled together so their pooled
    standard deviation equals sigma_v (mm per unit time). Values are stored in
    voxel units per unit time.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    grid = GridSpec(tuple(dims), tuple(spacing))
    rng = np.random.default_rng(seed)
    comps = []
    for _ in range(3):
        noise = rng.standard_normal((n_steps,) + grid.dims)
        cutoffs = (omega_t, omega_s, omega_s, omega_s)
        spacings = (1.0,) + grid.spacing
        comps.append(_fft_gaussian(noise, (0, 1, 2, 3), cutoffs, spacings))
    v = np.stack(comps, axis=-1)  # (T, nx, ny, nz, 3), mm-valued so far
    std = np.sqrt(np.mean(v**2) - np.mean(v) ** 2)
    if std > 0:
        v *= sigma_v / std
    v /= np.asarray(grid.spacing)  # mm -> voxel units
    return [VectorField(grid, v[t]) for t in range(n_steps)]


def integrate_flow(flows: list[VectorField], steps_per_gap: int) -> list[VectorField]:
    """Semi-Lagrangian integration of a time-indexed flow into per-session displacements.

    Each step advances u <- u + dt * v(x + u) with dt = 1/steps_per_gap (one
    session gap spans unit time). Returns the cumulative displacement at every
    session boundary, starting with the zero field for session one.
    """
    if steps_per_gap < 1:
        raise ValueError("steps_per_gap must be >= 1")
    grid = flows[0].grid
    ident = identity_positions(grid.dims)
    dt = 1.0 / steps_per_gap
    u = np.zeros(grid.dims + (3,))
    out = [VectorField(grid, u.copy())]
    for t, flow in enumerate(flows):
        u = u + dt * trilinear_gather(flow.data, ident + u)
        if (t + 1) % steps_per_gap == 0:
            out.append(VectorField(grid, u.copy()))
    return out


# ---------------------------------------------------------------------------
# Procedural phantom
# ---------------------------------------------------------------------------

def ellipsoid_phantom(dims, spacing=(1.0, 1.0, 1.0), texture_amp: float = 0.08, seed: int = 7) -> Volume:
    """Nested ellipsoid shells with distinct intensities plus mid-frequency texture.

    Edges are softened over about one voxel so the image is interpolation- and
    gradient-friendly; the texture keeps local contrast nonzero everywhere in
    the foreground.
    """
    grid = GridSpec(tuple(dims), tuple(spacing))
    pos = identity_positions(grid.dims)
    center = (np.asarray(grid.dims) - 1) / 2.0
    half = np.maximum((np.asarray(grid.dims) - 1) / 2.0, 1.0)

    # (semi-axis fractions, offset fraction, intensity) from outside in
    shells = [
        ((0.92, 0.86, 0.90), (0.00, 0.00, 0.00), 0.55),
        ((0.70, 0.66, 0.72), (0.03, -0.02, 0.01), 0.90),
        ((0.46, 0.50, 0.44), (-0.04, 0.03, -0.02), 0.40),
        ((0.24, 0.22, 0.26), (0.02, 0.04, 0.03), 1.00),
    ]
    img = np.zeros(grid.dims)
    prev = 0.0
    edge = 1.0 / np.mean(half)  # ~one voxel in normalized radius units
    for axes, offset, level in shells:
        c = center + np.asarray(offset) * half
        r = np.sqrt(np.sum(((pos - c) / (np.asarray(axes) * half)) ** 2, axis=-1))
        inside = 0.5 * (1.0 + np.tanh((1.0 - r) / edge))
        img += (level - prev) * inside
        prev = level

    if texture_amp > 0:
        rng = np.random.default_rng(seed)
        tex = smooth_sigma_vox(rng.standard_normal(grid.dims), 1.5)
        tex /= max(tex.std(), 1e-12)
        outer_axes = np.asarray(shells[0][0]) * half
        r0 = np.sqrt(np.sum(((pos - center) / outer_axes) ** 2, axis=-1))
        img += texture_amp * tex * (r0 < 1.0)
    return Volume(grid, img)


# ---------------------------------------------------------------------------
# Corrupted time series
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Settings for synthetic series generation; all magnitudes can be zeroed out."""

    n_sessions: int = 8
    steps_per_gap: int = 12
    omega_s: float = 0.05          # cycles/mm, spatial scale of the deformation
    omega_t: float = 0.05          # cycles/step, temporal coherence of the flow
    sigma_v: float = 0.3           # mm per unit (session) time
    gain_range: tuple[float, float] = (0.8, 1.2)
    offset_range: tuple[float, float] = (-0.1, 0.1)
    bias_amp: float = 0.1          # relative amplitude of the multiplicative bias field
    bias_omega: float = 0.03       # cycles/mm of the bias field
    noise_cnr: float | None = 8.0  # foreground-contrast to noise ratio; None disables
    times: list[float] | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SeriesTruth:
    """Generated series plus its ground truth, for the evaluation pipeline."""

    images: list[Volume]
    times: list[float]
    displacements: list[VectorField]  # pulls session 1 onto the grid of session k
    config: SynthConfig
    seed: int


def make_series(base: Volume, config: SynthConfig, seed: int) -> SeriesTruth:
    """Warp `base` by a generated diffeomorphic trajectory and corrupt each session.

    Session k is base warped by the cumulative displacement, then scaled by a
    random global gain/offset, multiplied by a smooth bias field, and degraded by
    additive Gaussian noise at the configured CNR. The returned displacement for
    session k is exactly the deformation that pulls session 1 onto its grid, so
    corruption never touches the truth record.
    """
    rng = np.random.default_rng(seed)
    grid = base.grid
    n = config.n_sessions
    if n < 2:
        raise ValueError("need at least two sessions")

    if config.sigma_v > 0:
        flows = gen_flow(
            grid.dims,
            grid.spacing,
            n_steps=config.steps_per_gap * (n - 1),
            omega_s=config.omega_s,
            omega_t=config.omega_t,
            sigma_v=config.sigma_v,
            seed=int(rng.integers(2**31)),
        )
        truths = integrate_flow(flows, config.steps_per_gap)
    else:
        truths = [VectorField(grid, np.zeros(grid.dims + (3,))) for _ in range(n)]

    for k, disp in enumerate(truths):
        det = jacobian_det(disp).data
        if np.any(det <= 0):
            raise RuntimeError(f"generated deformation for session {k + 1} folds (min det {det.min():.4f})")

    ident = identity_positions(grid.dims)
    fg_std = None
    images = []
    for k in range(n):
        img = trilinear_gather(base.data, ident + truths[k].data)
        if fg_std is None:
            fg_std = float(np.std(img[img > 0.1 * img.max()]))
        gain = rng.uniform(*config.gain_range)
        offset = rng.uniform(*config.offset_range)
        img = gain * img + offset
        if config.bias_amp > 0:
            bias = _fft_gaussian(rng.standard_normal(grid.dims), (0, 1, 2), [config.bias_omega] * 3, grid.spacing)
            bias /= max(np.abs(bias).max(), 1e-12)
            img = img * (1.0 + config.bias_amp * bias)
        if config.noise_cnr:
            img = img + rng.normal(0.0, fg_std / config.noise_cnr, size=grid.dims)
        images.append(Volume(grid, img))

    times = list(config.times) if config.times is not None else [float(k) for k in range(n)]
    if len(times) != n:
        raise ValueError("times length must equal n_sessions")
    return SeriesTruth(images=images, times=times, displacements=truths, config=config, seed=seed)
