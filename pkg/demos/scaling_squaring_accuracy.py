#!/usr/bin/env python3
"""How accurate is the scaling-and-squaring exponential?

Compares the fast exponential against dense Euler integration of the same
stationary flow, checks that the resulting deformations never fold, and shows
how inverse consistency degrades as flows get larger and rougher.
"""

import numpy as np

from longreg.diffeo import compose_displacements, exp_flow, invert_flow_exp
from longreg.grid import GridSpec, VectorField, identity_positions, jacobian_det, trilinear_gather
from longreg.synth import smooth_sigma_vox


def random_flow(dims, magnitude, sigma, seed):
    rng = np.random.default_rng(seed)
    f = smooth_sigma_vox(rng.standard_normal(tuple(dims) + (3,)), sigma)
    return f * (magnitude / np.sqrt((f**2).sum(axis=-1)).max())


def euler_integrate(flow, n_steps):
    ident = identity_positions(flow.shape[:3])
    u = np.zeros_like(flow)
    for _ in range(n_steps):
        u = u + (1.0 / n_steps) * trilinear_gather(flow, ident + u)
    return u


def main():
    g = GridSpec((16, 16, 16))
    inner = (slice(2, -2),) * 3

    print("exponential vs 512-step Euler (RMS voxels):")
    for mag in (0.5, 1.0, 2.0):
        flow = random_flow(g.dims, mag, 2.0, seed=1)
        fast = exp_flow(VectorField(g, flow))
        dense = euler_integrate(flow, 512)
        rms = np.sqrt(np.mean((fast.data - dense) ** 2))
        print(f"  magnitude {mag:.1f}: RMS {rms:.5f}")

    print("\ndiffeomorphism check (min Jacobian determinant):")
    for mag, sigma in ((1.0, 1.0), (3.0, 1.0), (3.0, 2.5)):
        flow = VectorField(g, random_flow(g.dims, mag, sigma, seed=2))
        det = jacobian_det(exp_flow(flow)).data
        print(f"  magnitude {mag:.1f}, smoothing {sigma:.1f}: min det {det.min():.3f} (positive = no folding)")

    print("\ninverse consistency |Exp(f) o Exp(-f) - Id| over the interior:")
    print("  (grows with magnitude and roughness; interpolation error, not a bug)")
    for mag, sigma in ((0.5, 2.0), (1.0, 2.0), (2.0, 2.0), (2.0, 1.0)):
        flow = VectorField(g, random_flow(g.dims, mag, sigma, seed=3))
        both = compose_displacements(exp_flow(flow), invert_flow_exp(flow))
        resid = np.abs(both.data[inner]).max()
        print(f"  magnitude {mag:.1f}, smoothing {sigma:.1f}: residual {resid:.4f} voxels")


if __name__ == "__main__":
    main()
