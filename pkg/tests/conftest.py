import numpy as np
import pytest

from longreg.grid import GridSpec, Volume, VectorField
from longreg.synth import ellipsoid_phantom, smooth_sigma_vox


def smooth_flow(dims, magnitude, sigma, seed, bias=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Gaussian-smoothed random flow scaled to a max vector magnitude, plus a bias."""
    rng = np.random.default_rng(seed)
    f = smooth_sigma_vox(rng.standard_normal(tuple(dims) + (3,)), sigma)
    mag = np.sqrt((f**2).sum(axis=-1)).max()
    if mag > 0:
        f *= magnitude / mag
    return f + np.asarray(bias)


@pytest.fixture(scope="session")
def phantom12() -> Volume:
    return ellipsoid_phantom((12, 12, 12), texture_amp=0.10, seed=3)


@pytest.fixture(scope="session")
def phantom16() -> Volume:
    return ellipsoid_phantom((16, 16, 16), texture_amp=0.10, seed=3)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def naive_trilinear(source: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Independent per-voxel trilinear interpolation oracle with clamp-to-edge."""
    shape = source.shape[:3]
    scalar = source.ndim == 3
    src = source[..., None] if scalar else source
    flat_pos = pos.reshape(-1, 3)
    out = np.zeros((flat_pos.shape[0], src.shape[3]))
    for v, p in enumerate(flat_pos):
        ws = []
        for a in range(3):
            n = shape[a]
            c = min(max(p[a], 0.0), n - 1.0)
            i0 = min(int(np.floor(c)), max(n - 2, 0))
            ws.append((i0, min(i0 + 1, n - 1), c - i0))
        acc = np.zeros(src.shape[3])
        for bx in (0, 1):
            for by in (0, 1):
                for bz in (0, 1):
                    w = (
                        (ws[0][2] if bx else 1 - ws[0][2])
                        * (ws[1][2] if by else 1 - ws[1][2])
                        * (ws[2][2] if bz else 1 - ws[2][2])
                    )
                    acc += w * src[ws[0][bx], ws[1][by], ws[2][bz]]
        out[v] = acc
    out = out.reshape(pos.shape[:-1] + (src.shape[3],))
    return out[..., 0] if scalar else out
