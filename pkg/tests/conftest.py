import numpy as np
import pytest

from fluorotrack.volume import DensityVolume, DisplacementField, GridGeometry


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_random_volume(geom: GridGeometry, rng, lo=0.5, hi=1.5) -> DensityVolume:
    """Strictly positive band-limited random density (kink-free test input)."""
    vals = rng.standard_normal(geom.dims)
    vals = _smooth3(vals, passes=4)
    vals -= vals.min()
    rngspan = vals.max() - vals.min()
    vals = lo + (hi - lo) * vals / (rngspan if rngspan > 0 else 1.0)
    return DensityVolume(geom, vals)


def smooth_random_field(geom: GridGeometry, rng, max_mm: float) -> DisplacementField:
    """Band-limited random displacement with ||u||_inf == max_mm."""
    vec = rng.standard_normal(geom.dims + (3,))
    for c in range(3):
        vec[..., c] = _smooth3(vec[..., c], passes=4)
    peak = np.abs(vec).max()
    vec *= max_mm / (peak if peak > 0 else 1.0)
    return DisplacementField(geom, vec)


def _smooth3(a: np.ndarray, passes: int) -> np.ndarray:
    out = a.astype(np.float64)
    for _ in range(passes):
        for ax in range(3):
            rolled_p = np.roll(out, 1, axis=ax)
            rolled_m = np.roll(out, -1, axis=ax)
            out = 0.5 * out + 0.25 * (rolled_p + rolled_m)
    return out


def gaussian_blob_volume(geom: GridGeometry, center_mm, sigma_mm, amp=1.0,
                         floor=0.0):
    grid = geom.center_grid()
    d2 = np.zeros(geom.dims)
    for c in range(3):
        d2 += ((grid[..., c] - center_mm[c]) / sigma_mm) ** 2
    return DensityVolume(geom, floor + amp * np.exp(-0.5 * d2))
