"""Geometric evaluation of recovered motion: distance-error maps, per-phase
tables, weight-trajectory comparisons, and inference throughput.

All errors are Euclidean voxel-wise distances in millimeters between
displacement fields.  Weight-recovery evaluation compares the network's
reconstruction both to the reconstruction from the true weights (isolating
network error) and, when ground-truth fields are supplied, to the raw truth
(total pipeline error including the subspace truncation).  Per-phase tables
additionally report statistics restricted to a body mask, since background
voxels dilute averages.  Figures are emitted as CSV plus PGM heatmaps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .regressor import RegressorModel, forward, infer_batch
from .subspace import MotionSubspace, project, reconstruct
from .volume import (
    DensityVolume,
    DisplacementField,
    require_same_geometry,
    write_pgm,
    write_volume,
)

__all__ = [
    "ErrorReport",
    "WeightRecoveryRow",
    "PhaseErrorRow",
    "ThroughputRow",
    "deformation_distance_error",
    "masked_error_stats",
    "evaluate_weight_recovery",
    "write_weight_recovery_csv",
    "evaluate_phases",
    "write_per_phase_csv",
    "write_error_map",
    "throughput_table",
    "write_throughput_csv",
]


@dataclass(frozen=True)
class ErrorReport:
    """Per-voxel displacement distance error (mm) with summary statistics."""

    geometry: object
    error_map: np.ndarray
    mean_error_mm: float
    max_error_mm: float

    def __post_init__(self):
        if self.error_map.shape != self.geometry.dims:
            raise ValueError("error map shape does not match geometry")
        if self.mean_error_mm < 0 or self.max_error_mm < self.mean_error_mm:
            raise ValueError("error statistics must satisfy 0 <= mean <= max")
        self.error_map.setflags(write=False)


def deformation_distance_error(d_true: DisplacementField,
                               d_pred: DisplacementField) -> ErrorReport:
    """Voxel-wise ‖d_true − d_pred‖₂ in mm over the shared grid."""
    require_same_geometry(d_true.geometry, d_pred.geometry,
                          "distance error operands")
    diff = d_true.vectors - d_pred.vectors
    err = np.sqrt(np.sum(diff * diff, axis=-1))
    peak = float(err.max())
    # summation rounding can push the mean of a constant map 1 ulp past it
    return ErrorReport(d_true.geometry, err, min(float(err.mean()), peak), peak)


def masked_error_stats(report: ErrorReport, mask: np.ndarray):
    """(mean, max) of the error map over a boolean mask (e.g. body support)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != report.error_map.shape:
        raise ValueError("mask shape does not match error map")
    if not mask.any():
        raise ValueError("mask selects no voxels")
    sel = report.error_map[mask]
    return float(sel.mean()), float(sel.max())


# ---------------------------------------------------------------------------
# weight-trajectory protocol (spline model points)


class WeightRecoveryRow(NamedTuple):
    sample: int
    true_weights: tuple
    inferred_weights: tuple
    vs_model_mean_mm: float
    vs_model_max_mm: float
    vs_truth_mean_mm: Optional[float]
    vs_truth_max_mm: Optional[float]


def evaluate_weight_recovery(sub: MotionSubspace, model: RegressorModel,
                             images: np.ndarray, true_weights: np.ndarray,
                             true_fields: Optional[Sequence] = None,
                             batch_size: int = 64):
    """Infer weights for every image and compare reconstructions.

    vs_model: reconstruction from inferred weights against reconstruction
    from the true weights (the network's own error in deformation space).
    vs_truth: against externally supplied ground-truth fields, when given
    (adds the subspace truncation error on top).
    """
    images = np.asarray(images)
    true_weights = np.asarray(true_weights, dtype=np.float64)
    if images.shape[0] != true_weights.shape[0]:
        raise ValueError("images and true_weights disagree on sample count")
    if true_weights.ndim != 2 or true_weights.shape[1] != sub.k:
        raise ValueError(f"true_weights must be (n, {sub.k})")
    if true_fields is not None and len(true_fields) != images.shape[0]:
        raise ValueError("true_fields count does not match images")

    inferred, _ = infer_batch(model, images, batch_size=batch_size)
    rows = []
    for i in range(images.shape[0]):
        rec_pred = reconstruct(sub, inferred[i])
        rec_true = reconstruct(sub, true_weights[i])
        vs_model = deformation_distance_error(rec_true, rec_pred)
        vs_truth_mean = vs_truth_max = None
        if true_fields is not None:
            vs_truth = deformation_distance_error(true_fields[i], rec_pred)
            vs_truth_mean, vs_truth_max = (vs_truth.mean_error_mm,
                                           vs_truth.max_error_mm)
        rows.append(WeightRecoveryRow(
            i, tuple(true_weights[i]), tuple(float(v) for v in inferred[i]),
            vs_model.mean_error_mm, vs_model.max_error_mm,
            vs_truth_mean, vs_truth_max,
        ))
    return rows


def write_weight_recovery_csv(path, rows) -> None:
    if not rows:
        raise ValueError("no rows to write")
    k = len(rows[0].true_weights)
    with_truth = rows[0].vs_truth_mean_mm is not None
    header = (["sample"]
              + [f"w{d + 1}_true" for d in range(k)]
              + [f"w{d + 1}_inferred" for d in range(k)]
              + ["vs_model_mean_mm", "vs_model_max_mm"])
    if with_truth:
        header += ["vs_truth_mean_mm", "vs_truth_max_mm"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            record = ([row.sample]
                      + [repr(v) for v in row.true_weights]
                      + [repr(v) for v in row.inferred_weights]
                      + [repr(row.vs_model_mean_mm), repr(row.vs_model_max_mm)])
            if with_truth:
                record += [repr(row.vs_truth_mean_mm),
                           repr(row.vs_truth_max_mm)]
            writer.writerow(record)


# ---------------------------------------------------------------------------
# per-phase protocol (ground-truth breathing phases)


class PhaseErrorRow(NamedTuple):
    phase: int
    avg_mm: float
    max_mm: float
    body_avg_mm: float
    body_max_mm: float
    subspace_avg_mm: float
    subspace_max_mm: float


def evaluate_phases(sub: MotionSubspace, model: RegressorModel,
                    images: np.ndarray, true_fields: Sequence,
                    body_mask: Optional[np.ndarray] = None,
                    batch_size: int = 64):
    """Per-phase distance errors of the recovered deformations.

    avg/max are against the raw ground-truth field (total pipeline error);
    body columns restrict to the mask (all voxels when omitted); subspace
    columns are against the truth's own projection onto the subspace,
    isolating network error from truncation error.  Returns
    (rows, error reports) with one entry per phase.
    """
    images = np.asarray(images)
    if images.shape[0] != len(true_fields):
        raise ValueError("one image per phase is required")
    if body_mask is None:
        body_mask = np.ones(sub.geometry.dims, dtype=bool)

    inferred, _ = infer_batch(model, images, batch_size=batch_size)
    rows = []
    reports = []
    for p in range(images.shape[0]):
        rec_pred = reconstruct(sub, inferred[p])
        report = deformation_distance_error(true_fields[p], rec_pred)
        body_avg, body_max = masked_error_stats(report, body_mask)
        truth_in_sub = reconstruct(sub, project(sub, true_fields[p]))
        vs_sub = deformation_distance_error(truth_in_sub, rec_pred)
        rows.append(PhaseErrorRow(
            p, report.mean_error_mm, report.max_error_mm,
            body_avg, body_max,
            vs_sub.mean_error_mm, vs_sub.max_error_mm,
        ))
        reports.append(report)
    return rows, reports


def write_per_phase_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "avg_mm", "max_mm", "body_avg_mm",
                         "body_max_mm", "subspace_avg_mm", "subspace_max_mm"])
        for row in rows:
            writer.writerow([row.phase] + [repr(v) for v in row[1:]])


def write_error_map(report: ErrorReport, rvf_path, pgm_path=None) -> None:
    """Full map as an RVF scalar volume; optional mid-axial PGM heatmap."""
    write_volume(DensityVolume(report.geometry, report.error_map), rvf_path)
    if pgm_path is not None:
        mid = report.geometry.dims[2] // 2
        write_pgm(pgm_path, report.error_map[:, :, mid])


# ---------------------------------------------------------------------------
# throughput


class ThroughputRow(NamedTuple):
    batch_size: int
    num_images: int
    images_per_second: float
    batch_latency_mean_s: float
    batch_latency_std_s: float
    batch_latency_cv: float


def throughput_table(model: RegressorModel, images: np.ndarray,
                     batch_sizes: Sequence[int] = (1, 8, 64),
                     warmup: bool = True):
    """Wall-clock inference throughput, one row per batch size."""
    images = np.asarray(images)
    if images.ndim != 3 or images.shape[0] < 1:
        raise ValueError("throughput needs a nonempty (n, H, W) image stack")
    if warmup:  # touch the code path once so timings exclude first-call costs
        forward(model, images[:1], mode="eval")
    rows = []
    for bs in batch_sizes:
        if bs < 1:
            raise ValueError("batch sizes must be >= 1")
        _, report = infer_batch(model, images, batch_size=int(bs))
        rows.append(ThroughputRow(int(bs), report.num_images,
                                  report.images_per_second,
                                  report.batch_latency_mean_s,
                                  report.batch_latency_std_s,
                                  report.batch_latency_cv))
    return rows


def write_throughput_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["batch_size", "num_images", "images_per_second",
                         "batch_latency_mean_s", "batch_latency_std_s",
                         "batch_latency_cv"])
        for row in rows:
            writer.writerow([row.batch_size, row.num_images]
                            + [repr(v) for v in row[2:]])
