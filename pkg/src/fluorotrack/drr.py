"""Cone-beam projection rendering by ray casting through a density volume.

Each detector pixel accumulates the line integral of the trilinear density
interpolant along the segment from the x-ray source to the pixel center,
clipped to the interpolant support box and integrated with the midpoint rule
(per-ray step no larger than the requested step).  Rays that miss the volume
contribute exactly 0.  Output values are attenuation * mm.

The detector frame is spanned by two orthonormal axes; pixel (i, j) sits at
corner + i * du * u_axis + j * dv * v_axis with the corner chosen so the
detector center lands mid-array.  The piercing point (foot of the
perpendicular from the source) and the source-detector distance l are
derived, never stored independently.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import HeaderFormatError
from .volume import (
    DensityVolume,
    DisplacementField,
    GridGeometry,
    _read_payload,
    format_header,
    parse_header,
    sample_points,
    warp_density,
)

__all__ = [
    "ProjectionGeometry",
    "ProjectionImage",
    "default_geometry",
    "render_drr",
    "render_drr_deformed",
    "write_projection",
    "read_projection",
]

_CHUNK_RAYS = 2048


@dataclass(frozen=True)
class ProjectionGeometry:
    """Source position plus detector plane, axes, pixel grid."""

    source: tuple
    detector_center: tuple
    detector_u_axis: tuple
    detector_v_axis: tuple
    det_dims: tuple
    det_spacing: tuple

    def __post_init__(self):
        for name in ("source", "detector_center", "detector_u_axis",
                     "detector_v_axis"):
            val = tuple(float(v) for v in getattr(self, name))
            if len(val) != 3 or not all(np.isfinite(val)):
                raise ValueError(f"{name} must be 3 finite numbers")
            object.__setattr__(self, name, val)
        dims = tuple(int(d) for d in self.det_dims)
        spacing = tuple(float(s) for s in self.det_spacing)
        if len(dims) != 2 or any(d < 1 for d in dims):
            raise ValueError("det_dims must be two positive integers")
        if len(spacing) != 2 or any(s <= 0 for s in spacing):
            raise ValueError("det_spacing must be two positive numbers")
        object.__setattr__(self, "det_dims", dims)
        object.__setattr__(self, "det_spacing", spacing)
        u = np.asarray(self.detector_u_axis)
        v = np.asarray(self.detector_v_axis)
        if abs(np.linalg.norm(u) - 1) > 1e-9 or abs(np.linalg.norm(v) - 1) > 1e-9:
            raise ValueError("detector axes must be unit length")
        if abs(u @ v) > 1e-9:
            raise ValueError("detector axes must be orthogonal")
        if self.source_detector_distance_l <= 1e-9:
            raise ValueError("source must be off the detector plane")

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.detector_u_axis, self.detector_v_axis)

    @property
    def source_detector_distance_l(self) -> float:
        offset = np.asarray(self.detector_center) - np.asarray(self.source)
        return float(abs(offset @ self.normal))

    @property
    def corner(self) -> np.ndarray:
        """World position of pixel (0, 0)."""
        nu, nv = self.det_dims
        du, dv = self.det_spacing
        return (
            np.asarray(self.detector_center)
            - 0.5 * (nu - 1) * du * np.asarray(self.detector_u_axis)
            - 0.5 * (nv - 1) * dv * np.asarray(self.detector_v_axis)
        )

    @property
    def piercing_point(self) -> tuple:
        """Fractional pixel coordinates of the point nearest the source."""
        n = self.normal
        src = np.asarray(self.source)
        offset = np.asarray(self.detector_center) - src
        foot = src + (offset @ n) * n
        rel = foot - self.corner
        return (
            float(rel @ self.detector_u_axis) / self.det_spacing[0],
            float(rel @ self.detector_v_axis) / self.det_spacing[1],
        )

    def pixel_centers(self) -> np.ndarray:
        """(nu, nv, 3) world coordinates of every pixel center."""
        nu, nv = self.det_dims
        du, dv = self.det_spacing
        i = np.arange(nu)[:, None, None]
        j = np.arange(nv)[None, :, None]
        return (
            self.corner[None, None, :]
            + i * du * np.asarray(self.detector_u_axis)[None, None, :]
            + j * dv * np.asarray(self.detector_v_axis)[None, None, :]
        )


@dataclass(frozen=True)
class ProjectionImage:
    dims: tuple
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        dims = tuple(int(d) for d in self.dims)
        if vals.shape != dims:
            raise ValueError(f"values shape {vals.shape} != dims {dims}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("projection values must be finite")
        vals = vals.copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "dims", dims)


def default_geometry(
    vol_geometry: GridGeometry,
    source_axis_distance: float = 1000.0,
    source_detector_distance: float = 1500.0,
    det_dims=(1024, 768),
    det_spacing=(0.388, 0.388),
) -> ProjectionGeometry:
    """Lateral source on the +x axis of the volume center, detector plane
    perpendicular to the beam on the far side."""
    center = np.asarray(vol_geometry.center_point())
    source = center + np.array([source_axis_distance, 0.0, 0.0])
    det_center = source + np.array([-source_detector_distance, 0.0, 0.0])
    return ProjectionGeometry(
        source=tuple(source),
        detector_center=tuple(det_center),
        detector_u_axis=(0.0, 1.0, 0.0),
        detector_v_axis=(0.0, 0.0, 1.0),
        det_dims=tuple(det_dims),
        det_spacing=tuple(det_spacing),
    )


def _support_box(geom: GridGeometry):
    """Bounds of the trilinear interpolant support: one spacing beyond the
    outermost voxel centers (the tent functions fade to zero there)."""
    origin = np.asarray(geom.origin)
    spacing = np.asarray(geom.spacing)
    dims = np.asarray(geom.dims)
    return origin - spacing, origin + dims * spacing


def render_drr(vol: DensityVolume, geom: ProjectionGeometry,
               step_mm: float | None = None) -> ProjectionImage:
    """Midpoint-rule line integrals of vol along every source->pixel ray."""
    if step_mm is None:
        step_mm = 0.5 * min(vol.geometry.spacing)
    if step_mm <= 0:
        raise ValueError("step_mm must be positive")

    lo, hi = _support_box(vol.geometry)
    src = np.asarray(geom.source)
    pixels = geom.pixel_centers().reshape(-1, 3)
    out = np.zeros(pixels.shape[0], dtype=np.float64)

    for start in range(0, pixels.shape[0], _CHUNK_RAYS):
        chunk = pixels[start:start + _CHUNK_RAYS]
        d = chunk - src
        norm = np.linalg.norm(d, axis=1)
        dirs = d / norm[:, None]
        # slab clipping against the support box
        with np.errstate(divide="ignore", invalid="ignore"):
            t_lo = (lo[None, :] - src[None, :]) / dirs
            t_hi = (hi[None, :] - src[None, :]) / dirs
        t_near = np.where(np.isnan(t_lo), -np.inf, np.minimum(t_lo, t_hi))
        t_far = np.where(np.isnan(t_hi), np.inf, np.maximum(t_lo, t_hi))
        # axis-parallel rays: NaN from 0/0 means the ray never crosses that
        # slab boundary; inside-ness is handled by the sample mask anyway
        parallel = np.abs(dirs) < 1e-300
        t_near = np.where(parallel, -np.inf, t_near)
        t_far = np.where(parallel, np.inf, t_far)
        t0 = t_near.max(axis=1)
        t1 = t_far.min(axis=1)
        seg = np.maximum(t1 - t0, 0.0)
        # a parallel ray outside its slab never hits the box
        outside = np.any(
            parallel & ((src[None, :] < lo[None, :]) | (src[None, :] > hi[None, :])),
            axis=1,
        )
        seg = np.where(outside, 0.0, seg)
        hit = seg > 0
        if not np.any(hit):
            continue
        n_steps = np.ceil(seg[hit] / step_mm).astype(np.int64)
        h = seg[hit] / n_steps
        max_n = int(n_steps.max())
        idx = np.arange(max_n)[None, :]
        ts = t0[hit, None] + (idx + 0.5) * h[:, None]
        valid = idx < n_steps[:, None]
        pts = src[None, None, :] + dirs[hit][:, None, :] * ts[..., None]
        samples = sample_points(vol, pts.reshape(-1, 3)).reshape(ts.shape)
        sums = np.where(valid, samples, 0.0).sum(axis=1) * h
        block = np.zeros(chunk.shape[0])
        block[hit] = sums
        out[start:start + _CHUNK_RAYS] = block

    return ProjectionImage(geom.det_dims, out.reshape(geom.det_dims))


def render_drr_deformed(vol: DensityVolume, u: DisplacementField,
                        geom: ProjectionGeometry,
                        step_mm: float | None = None) -> ProjectionImage:
    """render_drr of the mass-preserving warp of vol by u."""
    return render_drr(warp_density(vol, u), geom, step_mm)


# ---------------------------------------------------------------------------
# projection file I/O (same header scheme as the 3-D files, kind=projection)


def write_projection(img: ProjectionImage, path, det_spacing=(1.0, 1.0)) -> None:
    blob = np.ascontiguousarray(img.values.T.astype("<f4")).tobytes()
    with open(path, "wb") as fh:
        fh.write(format_header("projection", img.dims, det_spacing, (0.0, 0.0)))
        fh.write(blob)


def read_projection(path) -> ProjectionImage:
    raw = Path(path).read_bytes()
    header = parse_header(raw, path)
    if header["kind"] != "projection":
        raise HeaderFormatError(
            f"{path}: kind {header['kind']!r}, expected 'projection'"
        )
    if len(header["dims"]) != 2:
        raise HeaderFormatError(f"{path}: projection needs 2 dims")
    nu, nv = header["dims"]
    flat = _read_payload(raw, header["payload_offset"], nu * nv, path)
    values = flat.reshape(nv, nu).T.astype(np.float64)
    return ProjectionImage((nu, nv), values)
