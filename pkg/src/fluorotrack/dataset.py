"""Labeled training corpus: weight grid -> deformation -> DRR -> samples.

Every grid weight vector is reconstructed into a deformation, applied to the
reference volume with the mass-preserving action, rendered to a projection,
conditioned by the fixed preprocessing chain, and persisted as one 2-D
projection file plus a row in targets.csv.  Pixel data is canonicalized to
32-bit floats at generation time, so regenerating, resuming, and reloading
all agree byte for byte.

The manifest is written last: its presence marks a complete corpus.
Generation is resumable; existing valid sample files are trusted and
re-read instead of re-rendered.  Packed .npy shards of all images and
targets are written alongside for training throughput (plain .npy, no
archive container, to keep the corpus byte-deterministic).
"""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass

import numpy as np

from .drr import (
    ProjectionGeometry,
    ProjectionImage,
    read_projection,
    render_drr,
    write_projection,
)
from .errors import ConfigError, MissingArtifactError, VolumeIOError
from .preprocess import preprocess_pipeline
from .subspace import MotionSubspace, reconstruct
from .volume import DensityVolume, require_same_geometry, warp_density

__all__ = [
    "DatasetManifest",
    "generate_dataset",
    "load_dataset",
    "split_dataset",
    "sample_filename",
]

_MANIFEST_NAME = "manifest.txt"
_IMAGES_SHARD = "shard_images.npy"
_TARGETS_SHARD = "shard_targets.npy"


def sample_filename(index: int) -> str:
    return f"sample_{index:06d}.rvf"


def _fingerprint(*parts) -> str:
    text = "|".join(repr(p) for p in parts)
    return hashlib.sha256(text.encode("ascii")).hexdigest()[:16]


def volume_fingerprint(vol: DensityVolume) -> str:
    g = vol.geometry
    payload = hashlib.sha256(
        np.ascontiguousarray(vol.values.astype("<f4")).tobytes()
    ).hexdigest()[:16]
    return _fingerprint(g.dims, g.spacing, g.origin, payload)


def projection_fingerprint(geom: ProjectionGeometry) -> str:
    return _fingerprint(geom.source, geom.detector_center, geom.detector_u_axis,
                        geom.detector_v_axis, geom.det_dims, geom.det_spacing)


def subspace_fingerprint(sub: MotionSubspace) -> str:
    return _fingerprint(sub.geometry.dims, sub.geometry.spacing, sub.k,
                        sub.num_source_fields, tuple(sub.eigenvalues))


@dataclass(frozen=True)
class DatasetManifest:
    count: int
    image_dims: tuple
    k: int
    target_maxabs: tuple
    volume_fingerprint: str
    projection_fingerprint: str
    subspace_fingerprint: str
    render_step_mm: float
    bins: int

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if any(m < 0 for m in self.target_maxabs):
            raise ValueError("target max-abs statistics must be nonnegative")


def _write_manifest(path, man: DatasetManifest) -> None:
    lines = [
        "kind=training-dataset",
        f"count={man.count}",
        f"image_dims={man.image_dims[0]} {man.image_dims[1]}",
        f"k={man.k}",
        "target_maxabs=" + ",".join(repr(float(m)) for m in man.target_maxabs),
        f"volume_fingerprint={man.volume_fingerprint}",
        f"projection_fingerprint={man.projection_fingerprint}",
        f"subspace_fingerprint={man.subspace_fingerprint}",
        f"render_step_mm={man.render_step_mm!r}",
        f"bins={man.bins}",
        "",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines))


def _read_manifest(path) -> DatasetManifest:
    entries = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            entries[key] = val
    if entries.get("kind") != "training-dataset":
        raise ConfigError(f"{path}: not a dataset manifest")
    dims = tuple(int(t) for t in entries["image_dims"].split())
    return DatasetManifest(
        count=int(entries["count"]),
        image_dims=dims,
        k=int(entries["k"]),
        target_maxabs=tuple(float(v) for v in entries["target_maxabs"].split(",")),
        volume_fingerprint=entries["volume_fingerprint"],
        projection_fingerprint=entries["projection_fingerprint"],
        subspace_fingerprint=entries["subspace_fingerprint"],
        render_step_mm=float(entries["render_step_mm"]),
        bins=int(entries["bins"]),
    )


def generate_dataset(
    ref_vol: DensityVolume,
    sub: MotionSubspace,
    weights,
    proj_geom: ProjectionGeometry,
    out_dir,
    step_mm: float | None = None,
    bins: int = 256,
    progress: bool = False,
) -> DatasetManifest:
    """Render and persist one sample per weight vector; manifest written last.

    If a manifest already exists it must match the request (count and
    fingerprints); the corpus is then complete and returned as-is.  Without a
    manifest, any existing valid sample files are reused.
    """
    require_same_geometry(ref_vol.geometry, sub.geometry, "volume and subspace")
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if weights.shape[1] != sub.k:
        raise ValueError(f"weights have {weights.shape[1]} dims, subspace has {sub.k}")
    if not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite")
    n = weights.shape[0]
    if step_mm is None:
        step_mm = 0.5 * min(ref_vol.geometry.spacing)

    fingerprints = (
        volume_fingerprint(ref_vol),
        projection_fingerprint(proj_geom),
        subspace_fingerprint(sub),
    )

    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, _MANIFEST_NAME)
    if os.path.exists(manifest_path):
        man = _read_manifest(manifest_path)
        if (
            man.count != n
            or (man.volume_fingerprint, man.projection_fingerprint,
                man.subspace_fingerprint) != fingerprints
        ):
            raise ConfigError(
                f"{out_dir}: existing dataset was generated from a different "
                "configuration; use a fresh output directory"
            )
        return man

    out_dims = (proj_geom.det_dims[0] // 2, proj_geom.det_dims[1] // 2)
    images = np.empty((n,) + out_dims, dtype=np.float32)
    for i in range(n):
        path = os.path.join(out_dir, sample_filename(i))
        reused = False
        if os.path.exists(path):
            try:
                existing = read_projection(path)
                if existing.dims == out_dims:
                    images[i] = existing.values.astype(np.float32)
                    reused = True
            except VolumeIOError:
                pass  # damaged partial file: regenerate below
        if not reused:
            u = reconstruct(sub, weights[i])
            warped = warp_density(ref_vol, u)
            raw = render_drr(warped, proj_geom, step_mm)
            pre = preprocess_pipeline(raw, bins=bins)
            # canonical 32-bit pixels: memory, disk, and shards all agree
            vals32 = pre.values.astype(np.float32)
            images[i] = vals32
            write_projection(
                ProjectionImage(pre.dims, vals32.astype(np.float64)), path,
                det_spacing=(proj_geom.det_spacing[0] * 2,
                             proj_geom.det_spacing[1] * 2),
            )
        if progress and (i + 1) % 50 == 0:
            print(f"generated {i + 1}/{n} samples", flush=True)

    targets_path = os.path.join(out_dir, "targets.csv")
    with open(targets_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id"] + [f"w{j + 1}" for j in range(sub.k)])
        for i in range(n):
            writer.writerow([i] + [repr(float(v)) for v in weights[i]])

    np.save(os.path.join(out_dir, _IMAGES_SHARD), images)
    np.save(os.path.join(out_dir, _TARGETS_SHARD), weights)

    maxabs = np.max(np.abs(weights), axis=0)
    man = DatasetManifest(
        count=n,
        image_dims=out_dims,
        k=sub.k,
        target_maxabs=tuple(float(m) for m in maxabs),
        volume_fingerprint=fingerprints[0],
        projection_fingerprint=fingerprints[1],
        subspace_fingerprint=fingerprints[2],
        render_step_mm=float(step_mm),
        bins=bins,
    )
    _write_manifest(manifest_path, man)
    return man


def load_dataset(out_dir):
    """(images, targets, manifest) from a completed corpus directory.

    Images come back as float64 in [0, 1] with shape (count, nu, nv);
    targets as float64 (count, K).
    """
    manifest_path = os.path.join(out_dir, _MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise MissingArtifactError(manifest_path, "gendata")
    man = _read_manifest(manifest_path)
    images = np.load(os.path.join(out_dir, _IMAGES_SHARD)).astype(np.float64)
    targets = np.load(os.path.join(out_dir, _TARGETS_SHARD)).astype(np.float64)
    if images.shape != (man.count,) + man.image_dims:
        raise ConfigError(f"{out_dir}: image shard shape {images.shape} does not "
                          f"match manifest")
    if targets.shape != (man.count, man.k):
        raise ConfigError(f"{out_dir}: target shard shape {targets.shape} does "
                          f"not match manifest")
    return images, targets, man


def split_dataset(count: int, fraction: float = 0.8, seed: int = 0):
    """Deterministic disjoint (train_ids, holdout_ids) permutation split."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be strictly between 0 and 1")
    if count < 2:
        raise ValueError("need at least 2 samples to split")
    perm = np.random.default_rng(seed).permutation(count)
    n_train = int(np.floor(fraction * count))
    n_train = min(max(n_train, 1), count - 1)
    return perm[:n_train], perm[n_train:]
