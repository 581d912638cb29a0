"""Analytic 4-D breathing phantom with exactly known generating deformations.

A torso-like density (body ellipsoid, two low-density lungs, a dense tumor)
breathes through a two-dimensional motion space: a superior-inferior
compression field v1 and an anterior-posterior shear field v2, both windowed
by a truncated Gaussian that is exactly zero outside a finite radius, so
every phase deformation vanishes at the volume boundary.  Phase weights
trace a hysteresis loop (w1 cosine, w2 sine), making the ground-truth
deformation stack exactly rank 2.

The same module houses the weight-space breathing spline used for geometric
evaluation: a uniform Catmull-Rom curve (closed by default) through per-phase
weight vectors, sampled at evenly spaced parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .volume import (
    DensityVolume,
    DisplacementField,
    GridGeometry,
    jacobian_determinant,
    warp_density,
)

__all__ = [
    "PhantomConfig",
    "BreathingSpline",
    "make_reference_volume",
    "generating_fields",
    "breathing_weights",
    "generate_4d_series",
    "catmull_rom_point",
    "sample_spline",
]


@dataclass(frozen=True)
class PhantomConfig:
    """Geometry and anatomy of the analytic phantom.

    Lengths in mm.  The lungs sit symmetrically about the body center along
    x; the tumor is centered in the negative-x lung.  blend_mm is the edge
    blending width in world units (about one voxel at the default grid), so
    the underlying continuous density does not change under grid refinement.
    """

    dims: tuple = (64, 64, 48)
    spacing: tuple = (2.0, 2.0, 3.0)
    body_radii: tuple = (52.0, 52.0, 60.0)
    body_density: float = 1.0
    lung_radii: tuple = (19.0, 23.0, 32.0)
    lung_offset_x: float = 26.0
    lung_density: float = 0.25
    tumor_radius: float = 9.0
    tumor_density: float = 0.9
    blend_mm: float = 2.0
    window_sigma: tuple = (16.0, 16.0, 19.0)
    window_cutoff: float = 3.5
    amplitude1: float = 12.0
    amplitude2: float = 4.0
    num_phases: int = 10
    texture_amp: float = 0.3
    texture_modes: int = 10
    texture_wavelengths: tuple = (24.0, 48.0)
    seed: int = 0

    def __post_init__(self):
        if any(d < 2 for d in self.dims) or any(s <= 0 for s in self.spacing):
            raise ValueError("need dims >= 2 and positive spacing")
        for name in ("body_density", "lung_density", "tumor_density"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if min(self.body_radii) <= 0 or min(self.lung_radii) <= 0 \
                or self.tumor_radius <= 0:
            raise ValueError("radii must be positive")
        if self.blend_mm <= 0 or min(self.window_sigma) <= 0 \
                or self.window_cutoff <= 0:
            raise ValueError("blend, window sigma, and cutoff must be positive")
        if self.num_phases < 2:
            raise ValueError("need at least 2 phases")
        if self.amplitude1 < 0 or self.amplitude2 < 0:
            raise ValueError("amplitudes must be nonnegative")
        if not 0.0 <= self.texture_amp < 1.0:
            raise ValueError("texture_amp must be in [0, 1)")
        if self.texture_modes < 1:
            raise ValueError("texture_modes must be >= 1")
        lo, hi = self.texture_wavelengths
        if lo <= 0 or hi < lo:
            raise ValueError("texture_wavelengths must be 0 < min <= max")
        # axis-wise containment guards (centers differ along x only)
        for d in range(3):
            gap = self.lung_offset_x if d == 0 else 0.0
            if gap + self.lung_radii[d] + self.blend_mm > self.body_radii[d]:
                raise ValueError("lung ellipsoid does not fit inside the body")
            if self.tumor_radius + self.blend_mm > self.lung_radii[d]:
                raise ValueError("tumor does not fit inside the lung")

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.dims, self.spacing, (0.0, 0.0, 0.0))


def _smoothstep(x: np.ndarray) -> np.ndarray:
    t = np.clip(x, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _ellipsoid_mask(geom: GridGeometry, center, radii, blend_mm: float):
    """1 deep inside, 0 outside, cubic ramp over blend_mm at the surface."""
    grid = geom.center_grid()
    q = np.zeros(geom.dims)
    for d in range(3):
        q += ((grid[..., d] - center[d]) / radii[d]) ** 2
    rho = np.sqrt(q)
    delta = blend_mm / min(radii)
    return 1.0 - _smoothstep((rho - (1.0 - delta)) / delta)


def _texture_pattern(cfg: PhantomConfig) -> np.ndarray:
    """Smooth tissue-texture modulation with an analytic sup bound of 1.

    A fixed sum of cosine plane waves whose directions, wavelengths, and
    phases are drawn deterministically from cfg.seed.  Evaluating at
    physical coordinates keeps the pattern (hence the total mass) stable
    under grid refinement.  Dividing by the mode count bounds |g| <= 1,
    so 1 + amp * g stays positive for any amp < 1.
    """
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.texture_wavelengths
    grid = cfg.geometry.center_grid()
    g = np.zeros(cfg.dims)
    for _ in range(cfg.texture_modes):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        wavevec = (2.0 * np.pi / rng.uniform(lo, hi)) * direction
        g += np.cos(grid @ wavevec + rng.uniform(0.0, 2.0 * np.pi))
    return g / cfg.texture_modes


def make_reference_volume(cfg: PhantomConfig) -> DensityVolume:
    """Full-exhale anatomy: nested blended ellipsoids on a zero background.

    Body and lung interiors carry a gentle multiplicative texture so that
    interior motion is observable to density matching (translating a
    uniform density is locally invisible); the tumor keeps its exact
    plateau value and the background stays zero.
    """
    geom = cfg.geometry
    center = np.asarray(geom.center_point())
    lung_l = center - [cfg.lung_offset_x, 0.0, 0.0]
    lung_r = center + [cfg.lung_offset_x, 0.0, 0.0]

    body = _ellipsoid_mask(geom, center, cfg.body_radii, cfg.blend_mm)
    left = _ellipsoid_mask(geom, lung_l, cfg.lung_radii, cfg.blend_mm)
    right = _ellipsoid_mask(geom, lung_r, cfg.lung_radii, cfg.blend_mm)
    tumor = _ellipsoid_mask(geom, lung_l, (cfg.tumor_radius,) * 3, cfg.blend_mm)

    # nested deltas: each mask adds the density step across its own surface
    values = (
        cfg.body_density * body
        + (cfg.lung_density - cfg.body_density) * (left + right)
        + (cfg.tumor_density - cfg.lung_density) * tumor
    )
    if cfg.texture_amp > 0.0:
        values = values * (
            1.0 + cfg.texture_amp * _texture_pattern(cfg) * (1.0 - tumor)
        )
    return DensityVolume(geom, np.maximum(values, 0.0))


def _window(cfg: PhantomConfig) -> np.ndarray:
    """Truncated Gaussian bump, exactly zero where the scaled radius exceeds
    the cutoff, rescaled to peak value 1 at its center."""
    geom = cfg.geometry
    center = geom.center_point()
    grid = geom.center_grid()
    q = np.zeros(geom.dims)
    for d in range(3):
        q += ((grid[..., d] - center[d]) / cfg.window_sigma[d]) ** 2
    c2 = cfg.window_cutoff**2
    floor = np.exp(-0.5 * c2)
    return np.maximum(0.0, np.exp(-0.5 * q) - floor) / (1.0 - floor)


def generating_fields(cfg: PhantomConfig):
    """The two unit generating fields (v1, v2).

    v1 points inferior (-z) with peak magnitude exactly 1; v2 shears along y
    proportionally to the superior-inferior offset and is rescaled to match
    v1 in Frobenius norm.  The component supports are disjoint, so the two
    fields are pointwise (and globally) orthogonal.  Raises if either field
    folds at the configured amplitude.
    """
    geom = cfg.geometry
    w = _window(cfg)
    v1 = np.zeros(geom.dims + (3,))
    v1[..., 2] = -w
    peak = np.max(np.abs(v1))
    if peak <= 0:
        raise ValueError("motion window vanishes on this grid")
    v1 /= peak  # unit peak on the grid: amplitude A1 means A1 millimetres

    dz = (geom.center_grid()[..., 2] - geom.center_point()[2]) / cfg.window_sigma[2]
    v2 = np.zeros(geom.dims + (3,))
    v2[..., 1] = w * dz
    n1 = np.linalg.norm(v1)
    n2 = np.linalg.norm(v2)
    if n2 > 0:
        v2 *= n1 / n2

    f1 = DisplacementField(geom, v1)
    f2 = DisplacementField(geom, v2)
    for amp, f, name in ((cfg.amplitude1, f1, "v1"), (cfg.amplitude2, f2, "v2")):
        scaled = DisplacementField(geom, amp * f.vectors)
        if jacobian_determinant(scaled).min() <= 0:
            raise ValueError(f"amplitude too large: {name} folds the grid")
    return f1, f2


def breathing_weights(t, amplitude1: float, amplitude2: float):
    """Hysteresis-loop weights: w1 = A1 (1 - cos 2 pi t) / 2, w2 = A2 sin 2 pi t.

    t = 0 is full exhale (w = 0); the loop encloses signed area
    -pi A1 A2 / 2, so inhale and exhale follow different paths.
    """
    t = np.asarray(t, dtype=np.float64)
    w1 = amplitude1 * (1.0 - np.cos(2.0 * np.pi * t)) / 2.0
    w2 = amplitude2 * np.sin(2.0 * np.pi * t)
    return w1, w2


def generate_4d_series(cfg: PhantomConfig):
    """(volumes, true_fields) over num_phases breathing phases.

    Phase p sits at t = p / num_phases; its deformation is
    u_p = w1(t) v1 + w2(t) v2 and its volume the mass-preserving warp of the
    reference.  Phase 0 has u = 0 and reproduces the reference bitwise.
    """
    reference = make_reference_volume(cfg)
    v1, v2 = generating_fields(cfg)
    volumes = []
    fields = []
    for p in range(cfg.num_phases):
        t = p / cfg.num_phases
        w1, w2 = breathing_weights(t, cfg.amplitude1, cfg.amplitude2)
        vec = w1 * v1.vectors + w2 * v2.vectors
        u = DisplacementField(cfg.geometry, vec)
        if jacobian_determinant(u).min() <= 0:
            raise ValueError(f"phase {p} deformation folds the grid")
        volumes.append(warp_density(reference, u))
        fields.append(u)
    return volumes, fields


# ---------------------------------------------------------------------------
# weight-space breathing spline


@dataclass(frozen=True)
class BreathingSpline:
    """Uniform Catmull-Rom curve through per-phase weight vectors."""

    control_points: np.ndarray
    closed: bool = True
    samples: int = 40

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.control_points, dtype=np.float64))
        if self.closed and pts.shape[0] < 3:
            raise ValueError("closed spline needs at least 3 control points")
        if not self.closed and pts.shape[0] < 2:
            raise ValueError("open spline needs at least 2 control points")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if not np.all(np.isfinite(pts)):
            raise ValueError("control points must be finite")
        pts = pts.copy()
        pts.flags.writeable = False
        object.__setattr__(self, "control_points", pts)


def catmull_rom_point(points: np.ndarray, s: float, closed: bool = True):
    """Evaluate the uniform Catmull-Rom curve at global parameter s.

    Integer s hits control point s exactly.  Closed curves are periodic with
    period n; open curves clamp the end tangents by repeating the endpoint
    and accept s in [0, n - 1].
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = pts.shape[0]
    if closed:
        s = float(s) % n
        j = int(np.floor(s))
        t = s - j
        p0, p1, p2, p3 = (pts[(j + k - 1) % n] for k in range(4))
    else:
        if s < 0 or s > n - 1:
            raise ValueError("open spline parameter out of range")
        j = min(int(np.floor(s)), n - 2)
        t = float(s) - j
        idx = [max(j - 1, 0), j, j + 1, min(j + 2, n - 1)]
        p0, p1, p2, p3 = (pts[i] for i in idx)
    t2 = t * t
    t3 = t2 * t
    return 0.5 * (
        2.0 * p1
        + (-p0 + p2) * t
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2
        + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t3
    )


def sample_spline(model: BreathingSpline) -> np.ndarray:
    """(samples, K) points at evenly spaced parameters along the curve."""
    pts = model.control_points
    n = pts.shape[0]
    if model.closed:
        params = np.arange(model.samples) * (n / model.samples)
    else:
        params = np.linspace(0.0, n - 1, model.samples)
    return np.stack(
        [catmull_rom_point(pts, s, closed=model.closed) for s in params]
    )
