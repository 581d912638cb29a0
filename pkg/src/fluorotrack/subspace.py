"""Low-dimensional motion subspace extracted from registered deformations.

Centered PCA over the stacked displacement rows: the mean field is removed,
the top eigenpairs of the small Gram matrix give orthonormal component
fields, and a deformation is summarized by its weight vector of Frobenius
inner products against the components.  Reconstruction is affine about the
mean, so weight 0 maps to the mean deformation, not to zero.

Weights carry mm * voxel-count units (plain dot products of flattened
fields); the grid sampler spans symmetric ranges scaled from the source
projections, row-major with the first weight varying slowest.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import HeaderFormatError, MissingArtifactError
from .volume import (
    DisplacementField,
    GridGeometry,
    require_same_geometry,
    read_field,
    write_field,
)

__all__ = [
    "MotionSubspace",
    "fit_pca",
    "project",
    "reconstruct",
    "sample_weight_grid",
    "save_subspace",
    "load_subspace",
    "write_weights_csv",
    "read_weights_csv",
    "write_explained_variance_csv",
]

_MANIFEST_NAME = "subspace.txt"


@dataclass(frozen=True)
class MotionSubspace:
    """Mean deformation plus K orthonormal principal component fields.

    eigenvalues are the kept Gram eigenvalues (descending, >= 0);
    total_variance is the sum over all of them, so explained-variance
    fractions remain correct when fewer components are kept than exist.
    degenerate marks an all-identical input set (zero variance).
    """

    geometry: GridGeometry
    mean_field: DisplacementField
    components: tuple
    eigenvalues: tuple
    num_source_fields: int
    total_variance: float
    degenerate: bool

    @property
    def k(self) -> int:
        return len(self.components)

    def component_matrix(self) -> np.ndarray:
        """(K, 3 * nvox) row stack of the component fields."""
        return np.stack([c.vectors.reshape(-1) for c in self.components])

    def explained_variance(self) -> np.ndarray:
        """Cumulative eigenvalue fractions; reaches 1.0 when all directions
        with nonzero variance are kept."""
        if self.total_variance <= 0:
            return np.ones(self.k)
        return np.cumsum(self.eigenvalues) / self.total_variance


def fit_pca(fields: Sequence[DisplacementField], k: int) -> MotionSubspace:
    """Centered PCA of the stacked fields via the Gram route.

    Keeps min(k, N - 1) components for N input fields (mean removal leaves
    at most N - 1 independent directions).  Component signs are fixed so the
    largest-magnitude vector entry of each is positive.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(fields) < 2:
        raise ValueError("need at least 2 fields")
    geom = fields[0].geometry
    for f in fields[1:]:
        require_same_geometry(geom, f.geometry, "PCA input fields")

    rows = np.stack([f.vectors.reshape(-1) for f in fields])
    mean_row = rows.mean(axis=0)
    centered = rows - mean_row

    gram = centered @ centered.T
    lam, vecs = np.linalg.eigh(gram)
    lam = np.maximum(lam[::-1], 0.0)
    vecs = vecs[:, ::-1]
    total = float(lam.sum())
    degenerate = total <= 1e-12 * max(float(np.sum(rows * rows)), 1.0)
    if degenerate:
        # identical inputs: rounding fuzz in the mean is not variance
        lam = np.zeros_like(lam)
        total = 0.0

    k_eff = min(k, len(fields) - 1)
    comps = []
    kept = []
    for i in range(k_eff):
        sigma = np.sqrt(lam[i])
        if sigma > 0:
            comp = centered.T @ vecs[:, i] / sigma
            nrm = np.linalg.norm(comp)
            if nrm > 0:
                comp /= nrm
        else:
            # zero-variance direction: deterministic unit placeholder
            comp = np.zeros(centered.shape[1])
            comp[i % comp.size] = 1.0
        peak = np.argmax(np.abs(comp))
        if comp[peak] < 0:
            comp = -comp
        comps.append(DisplacementField(geom, comp.reshape(geom.dims + (3,))))
        kept.append(float(lam[i]))

    return MotionSubspace(
        geometry=geom,
        mean_field=DisplacementField(geom, mean_row.reshape(geom.dims + (3,))),
        components=tuple(comps),
        eigenvalues=tuple(kept),
        num_source_fields=len(fields),
        total_variance=total,
        degenerate=bool(degenerate),
    )


def project(sub: MotionSubspace, field: DisplacementField) -> np.ndarray:
    """Weights w_i = <field - mean, component_i> (Frobenius inner products)."""
    require_same_geometry(sub.geometry, field.geometry, "subspace and field")
    resid = (field.vectors - sub.mean_field.vectors).reshape(-1)
    return sub.component_matrix() @ resid


def reconstruct(sub: MotionSubspace, w) -> DisplacementField:
    """mean_field + sum_i w_i component_i."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (sub.k,):
        raise ValueError(f"weight vector must have length {sub.k}, got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    vec = sub.mean_field.vectors + np.tensordot(
        w, np.stack([c.vectors for c in sub.components]), axes=(0, 0)
    )
    return DisplacementField(sub.geometry, vec)


def sample_weight_grid(sub: MotionSubspace, n1: int, n2: int, scale1: float,
                       scale2: float, source_weights) -> np.ndarray:
    """(n1 * n2, K) row-major grid over the first two weight dimensions.

    Dimension d spans [-L_d, +L_d] with L_d = scale_d * max_i |w_d,i| over
    the source projections; the first dimension varies slowest.  Weights
    beyond the first two dimensions are zero.
    """
    src = np.atleast_2d(np.asarray(source_weights, dtype=np.float64))
    if src.size == 0:
        raise ValueError("source weights must not be empty")
    if n1 < 2 or n2 < 2:
        raise ValueError("need n1, n2 >= 2")
    if scale1 <= 0 or scale2 <= 0:
        raise ValueError("scales must be positive")
    if sub.k < 2:
        raise ValueError("weight grid needs a subspace with at least 2 components")
    l1 = scale1 * float(np.max(np.abs(src[:, 0])))
    l2 = scale2 * float(np.max(np.abs(src[:, 1])))
    w1 = np.linspace(-l1, l1, n1)
    w2 = np.linspace(-l2, l2, n2)
    grid = np.zeros((n1 * n2, sub.k))
    grid[:, 0] = np.repeat(w1, n2)
    grid[:, 1] = np.tile(w2, n1)
    return grid


# ---------------------------------------------------------------------------
# persistence: one field file per component + mean, plus a text manifest


def save_subspace(dirpath, sub: MotionSubspace) -> None:
    os.makedirs(dirpath, exist_ok=True)
    write_field(sub.mean_field, os.path.join(dirpath, "mean.rvf"))
    for i, comp in enumerate(sub.components):
        write_field(comp, os.path.join(dirpath, f"component_{i + 1:02d}.rvf"))
    lines = [
        "kind=motion-subspace",
        f"num_components={sub.k}",
        f"num_source_fields={sub.num_source_fields}",
        f"total_variance={sub.total_variance!r}",
        f"degenerate={int(sub.degenerate)}",
        "eigenvalues=" + ",".join(repr(e) for e in sub.eigenvalues),
        "",
    ]
    with open(os.path.join(dirpath, _MANIFEST_NAME), "w") as fh:
        fh.write("\n".join(lines))


def load_subspace(dirpath) -> MotionSubspace:
    manifest = os.path.join(dirpath, _MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise MissingArtifactError(manifest, "subspace")
    entries = {}
    with open(manifest) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise HeaderFormatError(f"bad subspace manifest line: {line!r}")
            key, val = line.split("=", 1)
            if key in entries:
                raise HeaderFormatError(f"duplicate subspace manifest key: {key}")
            entries[key] = val
    required = {"kind", "num_components", "num_source_fields", "total_variance",
                "degenerate", "eigenvalues"}
    missing = required - entries.keys()
    if missing:
        raise HeaderFormatError(f"subspace manifest missing keys: {sorted(missing)}")
    if entries["kind"] != "motion-subspace":
        raise HeaderFormatError(f"unexpected manifest kind: {entries['kind']!r}")

    k = int(entries["num_components"])
    mean = read_field(os.path.join(dirpath, "mean.rvf"))
    comps = tuple(
        read_field(os.path.join(dirpath, f"component_{i + 1:02d}.rvf"))
        for i in range(k)
    )
    eig_text = entries["eigenvalues"]
    eigenvalues = tuple(float(v) for v in eig_text.split(",")) if eig_text else ()
    if len(eigenvalues) != k:
        raise HeaderFormatError("eigenvalue count does not match num_components")
    return MotionSubspace(
        geometry=mean.geometry,
        mean_field=mean,
        components=comps,
        eigenvalues=eigenvalues,
        num_source_fields=int(entries["num_source_fields"]),
        total_variance=float(entries["total_variance"]),
        degenerate=bool(int(entries["degenerate"])),
    )


def write_weights_csv(path, weights) -> None:
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index"] + [f"w{i + 1}" for i in range(weights.shape[1])])
        for idx, row in enumerate(weights):
            writer.writerow([idx] + [repr(float(v)) for v in row])


def read_weights_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "index" or any(
            h != f"w{i + 1}" for i, h in enumerate(header[1:])
        ):
            raise HeaderFormatError(f"unexpected weight CSV header: {header}")
        rows = [[float(v) for v in row[1:]] for row in reader]
    return np.asarray(rows, dtype=np.float64)


def write_explained_variance_csv(path, sub: MotionSubspace) -> None:
    fractions = sub.explained_variance()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["num_components", "eigenvalue", "cumulative_fraction"])
        for i in range(sub.k):
            writer.writerow([i + 1, repr(sub.eigenvalues[i]), repr(float(fractions[i]))])
