"""Regular-grid containers and sampling primitives for scalar volumes and vector fields.

Scalar volumes are stored as (nx, ny, nz) arrays, vector fields as (nx, ny, nz, 3),
both C-ordered so the z index varies fastest. Displacements and positions are in
voxel units of the grid they live on; world (mm) coordinates only appear through
GridSpec metadata. All sampling clamps to the volume edge.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels

Triple = tuple[float, float, float]


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a regular grid: voxel counts, spacing (mm) and world origin (mm)."""

    dims: tuple[int, int, int]
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"grid dims must be three integers >= 1, got {self.dims}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"grid spacing must be three positive reals, got {self.spacing}")

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def voxel_to_world(self, idx: np.ndarray) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(idx) * np.asarray(self.spacing)


def _check_finite(data: np.ndarray, what: str):
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass
class Volume:
    """Scalar image on a regular grid."""

    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.shape != self.grid.dims:
            raise ValueError(f"volume shape {self.data.shape} != grid dims {self.grid.dims}")
        _check_finite(self.data, "volume")


@dataclass
class VectorField:
    """3-component field on a regular grid; values in voxel units unless stated otherwise.

    Interpreted either as a displacement u (the deformation map is x -> x + u(x))
    or as a stationary velocity, depending on context.
    """

    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.shape != self.grid.dims + (3,):
            raise ValueError(f"field shape {self.data.shape} != grid dims {self.grid.dims} + (3,)")
        _check_finite(self.data, "vector field")


@dataclass
class Mask:
    """Boolean region-of-interest paired with a grid."""

    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=bool)
        if self.data.shape != self.grid.dims:
            raise ValueError(f"mask shape {self.data.shape} != grid dims {self.grid.dims}")


def zero_field(grid: GridSpec) -> VectorField:
    return VectorField(grid, np.zeros(grid.dims + (3,)))


@dataclass
class ImageSeries:
    """Ordered volumes with strictly increasing acquisition times, on one grid."""

    images: list[Volume]
    times: list[float]

    def __post_init__(self):
        if not self.images:
            raise ValueError("series needs at least one image")
        if len(self.times) != len(self.images):
            raise ValueError("series times and images have different lengths")
        self.times = [float(t) for t in self.times]
        if any(t1 >= t2 for t1, t2 in zip(self.times, self.times[1:])):
            raise ValueError("series times must be strictly increasing")
        g = self.images[0].grid
        if any(img.grid != g for img in self.images):
            raise ValueError("all series images must share one grid")

    def __len__(self) -> int:
        return len(self.images)


@lru_cache(maxsize=32)
def _identity_cached(dims: tuple[int, int, int]) -> np.ndarray:
    pos = np.stack(np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij"), axis=-1)
    pos.setflags(write=False)
    return pos


def identity_positions(dims: tuple[int, int, int]) -> np.ndarray:
    """Voxel-coordinate position of every voxel, shape dims + (3,). Read-only and cached."""
    return _identity_cached(tuple(int(d) for d in dims))


# ---------------------------------------------------------------------------
# Trilinear kernel: gather (pull), scatter (its transpose) and the derivative
# with respect to sample positions. These three are the building blocks for
# warping and for the hand-written reverse-mode gradients elsewhere.
# ---------------------------------------------------------------------------

def _corner_data(shape: tuple[int, ...], pos: np.ndarray):
    """Clamped corner indices, fractional weights, and the interior mask per axis.

    pos is (V, 3). The mask marks positions whose value still changes as the
    position moves (strictly inside [0, n-1]); outside, clamping makes the
    sampled value locally constant.
    """
    v = pos.shape[0]
    idx0 = np.empty((v, 3), dtype=np.intp)
    idx1 = np.empty((v, 3), dtype=np.intp)
    frac = np.empty((v, 3), dtype=np.float64)
    inside = np.empty((v, 3), dtype=bool)
    for a in range(3):
        n = shape[a]
        c = np.clip(pos[:, a], 0.0, n - 1.0)
        i0 = np.floor(c).astype(np.intp)
        np.clip(i0, 0, max(n - 2, 0), out=i0)
        idx0[:, a] = i0
        idx1[:, a] = np.minimum(i0 + 1, n - 1)
        frac[:, a] = c - i0
        inside[:, a] = (pos[:, a] > 0.0) & (pos[:, a] < n - 1.0)
    return idx0, idx1, frac, inside


def _corner_weight_and_index(corner: int, idx0, idx1, frac, strides):
    w = np.ones(frac.shape[0], dtype=np.float64)
    flat = np.zeros(frac.shape[0], dtype=np.intp)
    for a in range(3):
        if (corner >> a) & 1:
            w = w * frac[:, a]
            flat += idx1[:, a] * strides[a]
        else:
            w = w * (1.0 - frac[:, a])
            flat += idx0[:, a] * strides[a]
    return w, flat


def _strides(shape: tuple[int, ...]) -> tuple[int, int, int]:
    return (shape[1] * shape[2], shape[2], 1)


def trilinear_gather(source: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Sample `source` at voxel coordinates `pos`, clamping to the edge.

    source: (nx, ny, nz) or (nx, ny, nz, C); pos: (..., 3).
    Returns pos.shape[:-1] (+ (C,) for multi-channel sources).
    """
    shape = source.shape[:3]
    channels = 1 if source.ndim == 3 else source.shape[3]
    flat_src = np.ascontiguousarray(source, dtype=np.float64).reshape(-1, channels)
    p = np.ascontiguousarray(pos, dtype=np.float64).reshape(-1, 3)
    out = np.empty((p.shape[0], channels), dtype=np.float64)
    if _kernels.HAVE_NUMBA:
        _kernels.gather_kernel(flat_src, shape[0], shape[1], shape[2], p, out)
    else:
        idx0, idx1, frac, _ = _corner_data(shape, p)
        strides = _strides(shape)
        out[:] = 0.0
        for corner in range(8):
            w, flat = _corner_weight_and_index(corner, idx0, idx1, frac, strides)
            out += w[:, None] * flat_src[flat]
    if source.ndim == 3:
        return out[:, 0].reshape(pos.shape[:-1])
    return out.reshape(pos.shape[:-1] + (channels,))


def trilinear_scatter(grad_out: np.ndarray, pos: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Transpose of trilinear_gather: distribute grad_out onto the source grid.

    Clamped positions deposit onto the clamped boundary voxel. Returns an array
    of `shape` (+ channel axis if grad_out has one).
    """
    p = np.ascontiguousarray(pos, dtype=np.float64).reshape(-1, 3)
    scalar = grad_out.shape == pos.shape[:-1]
    g = grad_out.reshape(-1, 1) if scalar else grad_out.reshape(-1, grad_out.shape[-1])
    g = np.ascontiguousarray(g, dtype=np.float64)
    channels = g.shape[1]
    nvox = shape[0] * shape[1] * shape[2]
    acc = np.zeros((nvox, channels), dtype=np.float64)
    if _kernels.HAVE_NUMBA:
        _kernels.scatter_kernel(g, shape[0], shape[1], shape[2], p, acc)
    else:
        idx0, idx1, frac, _ = _corner_data(shape, p)
        strides = _strides(shape)
        for corner in range(8):
            w, flat = _corner_weight_and_index(corner, idx0, idx1, frac, strides)
            for c in range(channels):
                acc[:, c] += np.bincount(flat, weights=w * g[:, c], minlength=nvox)
    if scalar:
        return acc[:, 0].reshape(shape)
    return acc.reshape(shape + (channels,))


def trilinear_pos_vjp(source: np.ndarray, pos: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of sum(grad_out * gather(source, pos)) with respect to pos.

    Zero along axes where the position is clamped. Returns array of pos.shape.
    """
    shape = source.shape[:3]
    channels = 1 if source.ndim == 3 else source.shape[3]
    flat_src = np.ascontiguousarray(source, dtype=np.float64).reshape(-1, channels)
    p = np.ascontiguousarray(pos, dtype=np.float64).reshape(-1, 3)
    g = grad_out.reshape(-1, 1) if source.ndim == 3 else grad_out.reshape(-1, channels)
    g = np.ascontiguousarray(g, dtype=np.float64)
    grad_pos = np.empty_like(p)
    if _kernels.HAVE_NUMBA:
        _kernels.pos_vjp_kernel(flat_src, shape[0], shape[1], shape[2], p, g, grad_pos)
        return grad_pos.reshape(pos.shape)
    idx0, idx1, frac, inside = _corner_data(shape, p)
    strides = _strides(shape)
    grad_pos[:] = 0.0
    w1 = frac
    w0 = 1.0 - frac
    for corner in range(8):
        _, flat = _corner_weight_and_index(corner, idx0, idx1, frac, strides)
        gv = np.einsum("vc,vc->v", g, flat_src[flat])
        for a in range(3):
            sign = 1.0 if (corner >> a) & 1 else -1.0
            b, c = (a + 1) % 3, (a + 2) % 3
            wb = w1[:, b] if (corner >> b) & 1 else w0[:, b]
            wc = w1[:, c] if (corner >> c) & 1 else w0[:, c]
            grad_pos[:, a] += sign * wb * wc * gv
    grad_pos *= inside
    return grad_pos.reshape(pos.shape)


# ---------------------------------------------------------------------------
# Grid-level operations
# ---------------------------------------------------------------------------

def sample_trilinear(vol: Volume, points: VectorField) -> Volume:
    """Interpolate `vol` at absolute voxel positions given by `points`.

    The output lives on points.grid; positions outside [0, dim-1] clamp to the edge.
    """
    _check_finite(points.data, "sample positions")
    out = trilinear_gather(vol.data, points.data)
    return Volume(points.grid, out)


def warp_volume(vol: Volume, deform: VectorField) -> Volume:
    """Pull `vol` through the deformation x -> x + deform(x)."""
    if vol.grid != deform.grid:
        raise ValueError("warp_volume: volume and deformation grids differ")
    pos = identity_positions(vol.grid.dims) + deform.data
    return Volume(vol.grid, trilinear_gather(vol.data, pos))


def warp_field(field: VectorField, deform: VectorField) -> VectorField:
    """Sample each component of `field` at x + deform(x) (clamp-to-edge)."""
    if field.grid != deform.grid:
        raise ValueError("warp_field: field and deformation grids differ")
    pos = identity_positions(field.grid.dims) + deform.data
    return VectorField(field.grid, trilinear_gather(field.data, pos))


def jacobian_fd(field: VectorField) -> np.ndarray:
    """Finite-difference Jacobian, shape dims + (3, 3) with J[..., c, a] = d u_c / d x_a.

    Central differences in the interior, one-sided at the boundary; units are
    voxel displacement per voxel.
    """
    if any(d < 2 for d in field.grid.dims):
        raise ValueError("jacobian_fd requires dims >= 2 along every axis")
    jac = np.empty(field.grid.dims + (3, 3), dtype=np.float64)
    for c in range(3):
        grads = np.gradient(field.data[..., c], axis=(0, 1, 2))
        for a in range(3):
            jac[..., c, a] = grads[a]
    return jac


def jacobian_det(deform: VectorField) -> Volume:
    """Determinant of I + grad(u) per voxel for a displacement field u."""
    jac = jacobian_fd(deform)
    for a in range(3):
        jac[..., a, a] += 1.0
    det = (
        jac[..., 0, 0] * (jac[..., 1, 1] * jac[..., 2, 2] - jac[..., 1, 2] * jac[..., 2, 1])
        - jac[..., 0, 1] * (jac[..., 1, 0] * jac[..., 2, 2] - jac[..., 1, 2] * jac[..., 2, 0])
        + jac[..., 0, 2] * (jac[..., 1, 0] * jac[..., 2, 1] - jac[..., 1, 1] * jac[..., 2, 0])
    )
    return Volume(deform.grid, det)


def _block_mean_axis(arr: np.ndarray, factor: int, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    starts = np.arange(0, n, factor)
    sums = np.add.reduceat(arr, starts, axis=axis)
    counts = np.minimum(starts + factor, n) - starts
    shape = [1] * arr.ndim
    shape[axis] = len(starts)
    return sums / counts.reshape(shape)


def downsample_grid(grid: GridSpec, factor: int) -> GridSpec:
    dims = tuple(int(np.ceil(d / factor)) for d in grid.dims)
    spacing = tuple(s * factor for s in grid.spacing)
    # block centers sit at fine index k*factor + (factor-1)/2
    origin = tuple(o + s * (factor - 1) / 2 for o, s in zip(grid.origin, grid.spacing))
    return GridSpec(dims, spacing, origin)


def downsample(vol: Volume, factor: int) -> Volume:
    """Block-average pooling over factor^3 blocks; partial edge blocks average what exists."""
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    if factor == 1:
        return Volume(vol.grid, vol.data.copy())
    data = vol.data
    for axis in range(3):
        data = _block_mean_axis(data, factor, axis)
    return Volume(downsample_grid(vol.grid, factor), data)


def _resample_positions(source: GridSpec, target: GridSpec) -> np.ndarray:
    """Positions of target voxel centers expressed in source voxel coordinates."""
    pos = identity_positions(target.dims).copy()
    for a in range(3):
        world = target.origin[a] + pos[..., a] * target.spacing[a]
        pos[..., a] = (world - source.origin[a]) / source.spacing[a]
    return pos


def _displacement_scale(source: GridSpec, target: GridSpec) -> np.ndarray:
    return np.array([source.spacing[a] / target.spacing[a] for a in range(3)])


def upsample_field(field: VectorField, target: GridSpec) -> VectorField:
    """Trilinearly resample a field onto `target`, preserving world-space displacement.

    Component values are rescaled by the voxel-size ratio so that a displacement
    of one source voxel becomes the equivalent number of target voxels.
    """
    if target == field.grid:
        return VectorField(target, field.data.copy())
    pos = _resample_positions(field.grid, target)
    out = trilinear_gather(field.data, pos)
    out *= _displacement_scale(field.grid, target)
    return VectorField(target, out)


def upsample_field_vjp(grad_target: np.ndarray, source: GridSpec, target: GridSpec) -> np.ndarray:
    """Adjoint of upsample_field: pull a gradient on the target grid back to the source grid."""
    if target == source:
        return grad_target.copy()
    pos = _resample_positions(source, target)
    g = grad_target * _displacement_scale(source, target)
    return trilinear_scatter(g, pos, source.dims)
