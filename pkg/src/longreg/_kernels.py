"""Compiled inner loops for the trilinear kernels.

Same contracts as the pure-numpy fallbacks in grid.py: clamp-to-edge sampling,
scatter as the exact transpose, position gradients masked where clamping makes
the sample locally constant. All loops are serial so accumulation order is
fixed and results are reproducible run to run.
"""

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap(args[0]) if args and callable(args[0]) else wrap


@njit(cache=True)
def _axis_setup(p, n):
    c = p
    if c < 0.0:
        c = 0.0
    elif c > n - 1.0:
        c = n - 1.0
    i0 = int(np.floor(c))
    hi = n - 2
    if hi < 0:
        hi = 0
    if i0 > hi:
        i0 = hi
    if i0 < 0:
        i0 = 0
    i1 = i0 + 1
    if i1 > n - 1:
        i1 = n - 1
    f = c - i0
    inside = 1.0 if (p > 0.0 and p < n - 1.0) else 0.0
    return i0, i1, f, inside


@njit(cache=True)
def gather_kernel(src, nx, ny, nz, pos, out):
    m, channels = out.shape
    for v in range(m):
        ix0, ix1, fx, _ = _axis_setup(pos[v, 0], nx)
        iy0, iy1, fy, _ = _axis_setup(pos[v, 1], ny)
        iz0, iz1, fz, _ = _axis_setup(pos[v, 2], nz)
        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz
        b000 = (ix0 * ny + iy0) * nz + iz0
        b001 = (ix0 * ny + iy0) * nz + iz1
        b010 = (ix0 * ny + iy1) * nz + iz0
        b011 = (ix0 * ny + iy1) * nz + iz1
        b100 = (ix1 * ny + iy0) * nz + iz0
        b101 = (ix1 * ny + iy0) * nz + iz1
        b110 = (ix1 * ny + iy1) * nz + iz0
        b111 = (ix1 * ny + iy1) * nz + iz1
        w000 = gx * gy * gz
        w001 = gx * gy * fz
        w010 = gx * fy * gz
        w011 = gx * fy * fz
        w100 = fx * gy * gz
        w101 = fx * gy * fz
        w110 = fx * fy * gz
        w111 = fx * fy * fz
        for c in range(channels):
            out[v, c] = (
                w000 * src[b000, c]
                + w001 * src[b001, c]
                + w010 * src[b010, c]
                + w011 * src[b011, c]
                + w100 * src[b100, c]
                + w101 * src[b101, c]
                + w110 * src[b110, c]
                + w111 * src[b111, c]
            )


@njit(cache=True)
def scatter_kernel(g, nx, ny, nz, pos, out):
    m, channels = g.shape
    for v in range(m):
        ix0, ix1, fx, _ = _axis_setup(pos[v, 0], nx)
        iy0, iy1, fy, _ = _axis_setup(pos[v, 1], ny)
        iz0, iz1, fz, _ = _axis_setup(pos[v, 2], nz)
        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz
        b000 = (ix0 * ny + iy0) * nz + iz0
        b001 = (ix0 * ny + iy0) * nz + iz1
        b010 = (ix0 * ny + iy1) * nz + iz0
        b011 = (ix0 * ny + iy1) * nz + iz1
        b100 = (ix1 * ny + iy0) * nz + iz0
        b101 = (ix1 * ny + iy0) * nz + iz1
        b110 = (ix1 * ny + iy1) * nz + iz0
        b111 = (ix1 * ny + iy1) * nz + iz1
        for c in range(channels):
            gv = g[v, c]
            out[b000, c] += gx * gy * gz * gv
            out[b001, c] += gx * gy * fz * gv
            out[b010, c] += gx * fy * gz * gv
            out[b011, c] += gx * fy * fz * gv
            out[b100, c] += fx * gy * gz * gv
            out[b101, c] += fx * gy * fz * gv
            out[b110, c] += fx * fy * gz * gv
            out[b111, c] += fx * fy * fz * gv


@njit(cache=True)
def pos_vjp_kernel(src, nx, ny, nz, pos, g, out):
    m, channels = g.shape
    for v in range(m):
        ix0, ix1, fx, mx = _axis_setup(pos[v, 0], nx)
        iy0, iy1, fy, my = _axis_setup(pos[v, 1], ny)
        iz0, iz1, fz, mz = _axis_setup(pos[v, 2], nz)
        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz
        b000 = (ix0 * ny + iy0) * nz + iz0
        b001 = (ix0 * ny + iy0) * nz + iz1
        b010 = (ix0 * ny + iy1) * nz + iz0
        b011 = (ix0 * ny + iy1) * nz + iz1
        b100 = (ix1 * ny + iy0) * nz + iz0
        b101 = (ix1 * ny + iy0) * nz + iz1
        b110 = (ix1 * ny + iy1) * nz + iz0
        b111 = (ix1 * ny + iy1) * nz + iz1
        dx = 0.0
        dy = 0.0
        dz = 0.0
        for c in range(channels):
            gv = g[v, c]
            s000 = src[b000, c]
            s001 = src[b001, c]
            s010 = src[b010, c]
            s011 = src[b011, c]
            s100 = src[b100, c]
            s101 = src[b101, c]
            s110 = src[b110, c]
            s111 = src[b111, c]
            dx += gv * (
                gy * gz * (s100 - s000)
                + gy * fz * (s101 - s001)
                + fy * gz * (s110 - s010)
                + fy * fz * (s111 - s011)
            )
            dy += gv * (
                gx * gz * (s010 - s000)
                + gx * fz * (s011 - s001)
                + fx * gz * (s110 - s100)
                + fx * fz * (s111 - s101)
            )
            dz += gv * (
                gx * gy * (s001 - s000)
                + gx * fy * (s011 - s010)
                + fx * gy * (s101 - s100)
                + fx * fy * (s111 - s110)
            )
        out[v, 0] = dx * mx
        out[v, 1] = dy * my
        out[v, 2] = dz * mz
