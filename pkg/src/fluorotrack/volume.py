"""Regular-grid scalar densities and displacement fields.

Conventions used throughout the package:

- volumes are axis-ordered (x, y, z): ``values[i, j, k]`` sits at world point
  ``origin + (i*sx, j*sy, k*sz)`` (millimeters);
- a displacement field stores the resampling offset ``u(x)`` in mm, i.e. the
  map ``x -> x + u(x)`` tells a consumer where to *read* from.  Warping pulls
  values through that map and weights them by its Jacobian determinant, so
  total mass is preserved for diffeomorphic fields.  This single convention
  is used everywhere; no other sign convention appears in the codebase;
- in-memory arrays are float64; the on-disk format is little-endian float32
  with a plain text header (see `write_volume`).  Interpolation outside the
  grid returns 0 (zero-padding boundary).

Per-voxel operations are vectorized with numpy and accumulate in float64, so
results do not depend on any worker/thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DataLengthError,
    GeometryMismatchError,
    HeaderFormatError,
    NonFiniteDataError,
)

__all__ = [
    "GridGeometry",
    "DensityVolume",
    "DisplacementField",
    "trilinear_sample",
    "sample_points",
    "sample_points_with_gradient",
    "jacobian_determinant",
    "displacement_jacobian",
    "warp_density",
    "read_volume",
    "write_volume",
    "read_field",
    "write_field",
    "write_pgm",
]


@dataclass(frozen=True)
class GridGeometry:
    """Dims, spacing (mm) and world origin (mm) of a regular grid."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("geometry needs 3 dims, 3 spacings, 3 origins")
        if any(d < 2 for d in dims):
            raise ValueError(f"dims must each be >= 2, got {dims}")
        if any(not math.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"spacing must be positive finite, got {spacing}")
        if any(not math.isfinite(o) for o in origin):
            raise ValueError(f"origin must be finite, got {origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def axis_coords(self, axis: int) -> np.ndarray:
        """World coordinates of the voxel centers along one axis."""
        return self.origin[axis] + self.spacing[axis] * np.arange(self.dims[axis])

    def center_grid(self) -> np.ndarray:
        """(nx, ny, nz, 3) array of voxel-center world coordinates."""
        xs, ys, zs = (self.axis_coords(a) for a in range(3))
        out = np.empty(self.dims + (3,), dtype=np.float64)
        out[..., 0] = xs[:, None, None]
        out[..., 1] = ys[None, :, None]
        out[..., 2] = zs[None, None, :]
        return out

    def center_point(self) -> np.ndarray:
        """World coordinates of the grid center."""
        return np.array(
            [
                self.origin[a] + 0.5 * self.spacing[a] * (self.dims[a] - 1)
                for a in range(3)
            ]
        )


def require_same_geometry(a: GridGeometry, b: GridGeometry, what: str = "operands"):
    if a != b:
        raise GeometryMismatchError(f"{what} must share grid geometry: {a} vs {b}")


def _as_value_array(values, dims, ncomp=None) -> np.ndarray:
    shape = tuple(dims) if ncomp is None else tuple(dims) + (ncomp,)
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"expected array of shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteDataError("array contains NaN or infinity")
    arr = arr.copy() if arr is values else arr
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class DensityVolume:
    """Nonnegative scalar density on a grid.  Values are read-only."""

    geometry: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        arr = _as_value_array(self.values, self.geometry.dims)
        if arr.min() < 0:
            raise ValueError("density values must be nonnegative")
        object.__setattr__(self, "values", arr)

    def total_mass(self) -> float:
        return float(self.values.sum(dtype=np.float64)) * self.geometry.voxel_volume


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel (ux, uy, uz) offsets in mm.  Values are read-only."""

    geometry: GridGeometry
    vectors: np.ndarray

    def __post_init__(self):
        arr = _as_value_array(self.vectors, self.geometry.dims, ncomp=3)
        object.__setattr__(self, "vectors", arr)

    @classmethod
    def zeros(cls, geometry: GridGeometry) -> "DisplacementField":
        return cls(geometry, np.zeros(geometry.dims + (3,), dtype=np.float64))

    def magnitude(self) -> np.ndarray:
        """Per-voxel Euclidean norm of the displacement, in mm."""
        return np.sqrt(np.sum(self.vectors**2, axis=-1))


# ---------------------------------------------------------------------------
# trilinear sampling


def _interp_corners(values: np.ndarray, geom: GridGeometry, points: np.ndarray,
                    want_gradient: bool):
    """Shared gather kernel for trilinear interpolation with zero padding.

    points is (n, 3) in world coordinates.  Returns sampled values (n,) and,
    if requested, the spatial gradient (n, 3) of the interpolant in 1/mm per
    value unit.  Corners outside the grid contribute 0, which makes the
    interpolant fade linearly to zero over one voxel spacing past the last
    voxel center.
    """
    dims = np.array(geom.dims)
    origin = np.array(geom.origin)
    spacing = np.array(geom.spacing)

    q = (points - origin) / spacing
    base = np.floor(q)
    frac = q - base
    base = base.astype(np.int64)

    vals = np.zeros(points.shape[0], dtype=np.float64)
    grad = np.zeros((points.shape[0], 3), dtype=np.float64) if want_gradient else None

    one_minus = 1.0 - frac
    for dx in (0, 1):
        wx = frac[:, 0] if dx else one_minus[:, 0]
        sx = 1.0 if dx else -1.0
        for dy in (0, 1):
            wy = frac[:, 1] if dy else one_minus[:, 1]
            sy = 1.0 if dy else -1.0
            for dz in (0, 1):
                wz = frac[:, 2] if dz else one_minus[:, 2]
                sz = 1.0 if dz else -1.0
                ix = base[:, 0] + dx
                iy = base[:, 1] + dy
                iz = base[:, 2] + dz
                valid = (
                    (ix >= 0) & (ix < dims[0])
                    & (iy >= 0) & (iy < dims[1])
                    & (iz >= 0) & (iz < dims[2])
                )
                v = np.where(
                    valid,
                    values[
                        np.clip(ix, 0, dims[0] - 1),
                        np.clip(iy, 0, dims[1] - 1),
                        np.clip(iz, 0, dims[2] - 1),
                    ],
                    0.0,
                )
                vals += v * wx * wy * wz
                if want_gradient:
                    grad[:, 0] += v * sx * wy * wz
                    grad[:, 1] += v * wx * sy * wz
                    grad[:, 2] += v * wx * wy * sz
    if want_gradient:
        grad /= spacing
        return vals, grad
    return vals


def sample_points(vol: DensityVolume, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of vol at world points (n, 3); 0 outside."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError("points must have shape (n, 3)")
    return _interp_corners(vol.values, vol.geometry, points, want_gradient=False)


def sample_points_with_gradient(vol: DensityVolume, points: np.ndarray):
    """Like `sample_points` but also returns the interpolant gradient (n, 3)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError("points must have shape (n, 3)")
    return _interp_corners(vol.values, vol.geometry, points, want_gradient=True)


def trilinear_sample(vol: DensityVolume, point) -> float:
    """Value of the trilinear interpolant at a single world point."""
    pt = np.asarray(point, dtype=np.float64).reshape(1, 3)
    return float(_interp_corners(vol.values, vol.geometry, pt, want_gradient=False)[0])


# ---------------------------------------------------------------------------
# Jacobians and mass-preserving warps


def displacement_jacobian(u: DisplacementField) -> np.ndarray:
    """Finite-difference Jacobian of x -> x + u(x).

    Returns F with shape (nx, ny, nz, 3, 3), F[..., a, b] = d(x+u)_a / d x_b,
    using central differences in the interior and one-sided differences on
    the grid faces, with physical spacing.
    """
    dims = u.geometry.dims
    spacing = u.geometry.spacing
    F = np.empty(dims + (3, 3), dtype=np.float64)
    for a in range(3):
        comp = u.vectors[..., a]
        for b in range(3):
            F[..., a, b] = np.gradient(comp, spacing[b], axis=b)
        F[..., a, a] += 1.0
    return F


def _det3(F: np.ndarray) -> np.ndarray:
    a, b, c = F[..., 0, 0], F[..., 0, 1], F[..., 0, 2]
    d, e, f = F[..., 1, 0], F[..., 1, 1], F[..., 1, 2]
    g, h, i = F[..., 2, 0], F[..., 2, 1], F[..., 2, 2]
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


def jacobian_determinant(u: DisplacementField) -> np.ndarray:
    """det(I + Du) on the grid; may be negative where the map folds."""
    return _det3(displacement_jacobian(u))


def warp_density(vol: DensityVolume, u: DisplacementField) -> DensityVolume:
    """Mass-weighted resampling of vol through x -> x + u(x).

    Output voxel x receives det(I + Du)(x) * vol(x + u(x)) with trilinear
    interpolation, clamped at 0.  For a volume-preserving smooth field the
    total mass is conserved up to discretization error.
    """
    require_same_geometry(vol.geometry, u.geometry, "volume and field")
    geom = vol.geometry
    pts = (geom.center_grid() + u.vectors).reshape(-1, 3)
    sampled = sample_points(vol, pts).reshape(geom.dims)
    det = jacobian_determinant(u)
    return DensityVolume(geom, np.maximum(det * sampled, 0.0))


# ---------------------------------------------------------------------------
# file I/O: text header + little-endian float32 payload, x-fastest order

_MAGIC = "RVF1"
_HEADER_KEYS = ("magic", "kind", "dims", "spacing", "origin", "dtype")
_KINDS_3D = ("density", "displacement")


def format_header(kind: str, dims, spacing, origin) -> bytes:
    lines = [
        f"magic={_MAGIC}",
        f"kind={kind}",
        "dims=" + " ".join(str(int(d)) for d in dims),
        "spacing=" + " ".join(repr(float(s)) for s in spacing),
        "origin=" + " ".join(repr(float(o)) for o in origin),
        "dtype=f32",
    ]
    return ("\n".join(lines) + "\n\n").encode("ascii")


def parse_header(raw: bytes, path) -> dict:
    """Parse the text header of an RVF file; returns a dict of fields."""
    end = raw.find(b"\n\n")
    if end < 0:
        raise HeaderFormatError(f"{path}: no blank line terminating the header")
    try:
        text = raw[:end].decode("ascii")
    except UnicodeDecodeError as exc:
        raise HeaderFormatError(f"{path}: header is not ASCII") from exc
    fields: dict[str, str] = {}
    for line in text.splitlines():
        if "=" not in line:
            raise HeaderFormatError(f"{path}: malformed header line {line!r}")
        key, _, value = line.partition("=")
        if key not in _HEADER_KEYS:
            raise HeaderFormatError(f"{path}: unknown header key {key!r}")
        if key in fields:
            raise HeaderFormatError(f"{path}: duplicate header key {key!r}")
        fields[key] = value
    missing = [k for k in _HEADER_KEYS if k not in fields]
    if missing:
        raise HeaderFormatError(f"{path}: missing header keys {missing}")
    if fields["magic"] != _MAGIC:
        raise HeaderFormatError(f"{path}: bad magic {fields['magic']!r}")
    if fields["dtype"] != "f32":
        raise HeaderFormatError(f"{path}: unsupported dtype {fields['dtype']!r}")
    try:
        dims = tuple(int(t) for t in fields["dims"].split())
        spacing = tuple(float(t) for t in fields["spacing"].split())
        origin = tuple(float(t) for t in fields["origin"].split())
    except ValueError as exc:
        raise HeaderFormatError(f"{path}: non-numeric dims/spacing/origin") from exc
    return {
        "kind": fields["kind"],
        "dims": dims,
        "spacing": spacing,
        "origin": origin,
        "payload_offset": end + 2,
    }


def _read_payload(raw: bytes, offset: int, count: int, path) -> np.ndarray:
    payload = raw[offset:]
    expected = count * 4
    if len(payload) != expected:
        raise DataLengthError(
            f"{path}: expected {expected} payload bytes, found {len(payload)}"
        )
    return np.frombuffer(payload, dtype="<f4")


def _check_3d_header(header, path, expected_kind):
    if header["kind"] != expected_kind:
        raise HeaderFormatError(
            f"{path}: kind {header['kind']!r}, expected {expected_kind!r}"
        )
    if len(header["dims"]) != 3:
        raise HeaderFormatError(f"{path}: 3-D file needs 3 dims")
    return GridGeometry(header["dims"], header["spacing"], header["origin"])


def write_volume(vol: DensityVolume, path) -> None:
    geom = vol.geometry
    # x-fastest scalar stream: transpose so the x index varies quickest
    blob = np.ascontiguousarray(
        vol.values.transpose(2, 1, 0).astype("<f4")
    ).tobytes()
    with open(path, "wb") as fh:
        fh.write(format_header("density", geom.dims, geom.spacing, geom.origin))
        fh.write(blob)


def read_volume(path) -> DensityVolume:
    raw = Path(path).read_bytes()
    header = parse_header(raw, path)
    geom = _check_3d_header(header, path, "density")
    nx, ny, nz = geom.dims
    flat = _read_payload(raw, header["payload_offset"], geom.voxel_count, path)
    values = flat.reshape(nz, ny, nx).transpose(2, 1, 0).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteDataError(f"{path}: payload contains NaN or infinity")
    # densities are nonnegative by contract; clamp f32 round-off on load
    return DensityVolume(geom, np.maximum(values, 0.0))


def write_field(u: DisplacementField, path) -> None:
    geom = u.geometry
    # x-fastest with (ux, uy, uz) interleaved per voxel
    blob = np.ascontiguousarray(
        u.vectors.transpose(2, 1, 0, 3).astype("<f4")
    ).tobytes()
    with open(path, "wb") as fh:
        fh.write(format_header("displacement", geom.dims, geom.spacing, geom.origin))
        fh.write(blob)


def read_field(path) -> DisplacementField:
    raw = Path(path).read_bytes()
    header = parse_header(raw, path)
    geom = _check_3d_header(header, path, "displacement")
    nx, ny, nz = geom.dims
    flat = _read_payload(raw, header["payload_offset"], 3 * geom.voxel_count, path)
    vectors = flat.reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3).astype(np.float64)
    if not np.all(np.isfinite(vectors)):
        raise NonFiniteDataError(f"{path}: payload contains NaN or infinity")
    return DisplacementField(geom, vectors)


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit binary PGM of a 2-D array, min-max scaled (lossy, inspection only)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("PGM output needs a 2-D array")
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo < 1e-300:
        scaled = np.zeros(arr.shape, dtype=np.uint8)
    else:
        scaled = np.round((arr - lo) / (hi - lo) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[0]} {arr.shape[1]}\n255\n".encode("ascii"))
        fh.write(scaled.T.tobytes())  # row-major raster: rows = second axis
