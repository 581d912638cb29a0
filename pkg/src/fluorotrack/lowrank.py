"""Rank-penalized joint registration of a volume series.

The displacement fields carrying the reference phase onto every other phase
are stacked as the rows of a matrix X (one row per phase, 3 * nvox columns
in disk payload order) and the joint objective

    sum_i E_i(u_i) + alpha * ||X||_*

is minimized by proximal gradient descent: every outer iteration takes one
safeguarded energy-descent step per phase, then applies singular value
thresholding to the stacked matrix.  The nuclear norm couples the phases and
drives the stack toward a common low-dimensional subspace.

All spectral quantities are computed through the (P, P) Gram matrix
G = X X^T, which is cheap because the number of phases P is tiny compared to
the number of voxels.  A threshold of zero short-circuits to the identity, so
alpha = 0 reproduces independent pairwise registrations exactly.
"""

from __future__ import annotations

import csv
from typing import NamedTuple, Sequence

import numpy as np

from .registration import (
    RegistrationConfig,
    _descent_step,
    _warm_start_vectors,
    pair_energy_terms,
)
from .volume import (
    DensityVolume,
    DisplacementField,
    GridGeometry,
    require_same_geometry,
)

__all__ = [
    "DeformationSetMatrix",
    "RankHistoryRow",
    "RankRegistrationResult",
    "singular_values",
    "nuclear_norm",
    "svt_prox",
    "register_rank_constrained",
    "write_rank_history",
]

_MAX_OUTER_HALVINGS = 20
_AUTO_ALPHA_RATIO = 0.05


class DeformationSetMatrix:
    """Stack of displacement fields viewed as a (P, 3 * nvox) matrix.

    Row i is field i flattened in the on-disk payload order (x fastest, then
    y, then z, components interleaved) so rows correspond byte-for-byte to
    stored fields.
    """

    def __init__(self, geometry: GridGeometry, matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[1] != 3 * geometry.voxel_count:
            raise ValueError(
                f"matrix shape {matrix.shape} does not match geometry "
                f"({geometry.voxel_count} voxels)"
            )
        self.geometry = geometry
        self.matrix = matrix

    @classmethod
    def from_fields(cls, fields: Sequence[DisplacementField]) -> "DeformationSetMatrix":
        if not fields:
            raise ValueError("need at least one field")
        geom = fields[0].geometry
        for f in fields[1:]:
            require_same_geometry(geom, f.geometry, "stacked fields")
        rows = [f.vectors.transpose(2, 1, 0, 3).ravel() for f in fields]
        return cls(geom, np.stack(rows))

    def to_fields(self) -> list[DisplacementField]:
        nx, ny, nz = self.geometry.dims
        return [
            DisplacementField(
                self.geometry,
                row.reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3),
            )
            for row in self.matrix
        ]

    @property
    def shape(self):
        return self.matrix.shape


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, DeformationSetMatrix):
        return x.matrix
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("expected a 2-d matrix")
    return arr


def singular_values(x) -> np.ndarray:
    """All singular values, descending, via the small Gram matrix X X^T."""
    mat = _as_matrix(x)
    gram = mat @ mat.T
    lam = np.linalg.eigvalsh(gram)[::-1]
    return np.sqrt(np.maximum(lam, 0.0))


def nuclear_norm(x) -> float:
    return float(singular_values(x).sum())


def svt_prox(x, tau: float):
    """Proximal map of tau * ||.||_*: soft-threshold the singular values.

    Implemented as W diag(max(s - tau, 0) / s) W^T X with W the eigenvectors
    of the Gram matrix, which never forms the right singular vectors.  A zero
    threshold returns the input unchanged.  Accepts and returns either a bare
    matrix or a DeformationSetMatrix.
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    mat = _as_matrix(x)
    if tau == 0.0:
        out = mat
    else:
        gram = mat @ mat.T
        lam, vecs = np.linalg.eigh(gram)
        lam = lam[::-1]
        vecs = vecs[:, ::-1]
        sig = np.sqrt(np.maximum(lam, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            shrink = np.where(sig > 0, np.maximum(sig - tau, 0.0) / np.where(sig > 0, sig, 1.0), 0.0)
        out = (vecs * shrink) @ (vecs.T @ mat)
    if isinstance(x, DeformationSetMatrix):
        return DeformationSetMatrix(x.geometry, out)
    return out


class RankHistoryRow(NamedTuple):
    iteration: int
    total_objective: float
    data_term: float
    penalty_term: float
    nuclear: float
    sigmas: tuple


class RankRegistrationResult(NamedTuple):
    fields: list
    history: list
    alpha: float


def _stack_rows(u_list) -> np.ndarray:
    return np.stack([u.transpose(2, 1, 0, 3).ravel() for u in u_list])


def _rows_to_vecs(mat, geom) -> list:
    nx, ny, nz = geom.dims
    return [row.reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3).copy() for row in mat]


def register_rank_constrained(
    volumes: Sequence[DensityVolume],
    ref_index: int,
    cfg: RegistrationConfig,
) -> RankRegistrationResult:
    """Jointly register a volume series against its reference phase with a
    nuclear norm penalty on the stacked displacement matrix.

    volumes[ref_index] acts as the common template: pair p estimates the
    displacement u_p that carries the template density onto series volume p
    (warp_density(template, u_p) ~ volume p).  This is the same direction the
    motion model is later applied in, so the recovered fields live directly
    in the space spanned by the generating deformations.  Fields are returned
    in series order with the reference skipped.

    cfg.rank_weight_alpha = 0 disables the coupling (the result then matches
    independent `register_pair(volume_p, template)` runs step for step);
    None picks the weight automatically after one uncoupled iteration as
    0.05 * data_term / ||X||_*, which puts the penalty on the scale of the
    remaining data mismatch.

    Returns fields (list of DisplacementField), a history of
    RankHistoryRow (row 0 is the initial state; totals use the alpha active
    at that iteration), and the alpha actually used.
    """
    if len(volumes) < 2:
        raise ValueError("need at least two volumes in the series")
    if not 0 <= ref_index < len(volumes):
        raise ValueError(
            f"ref_index {ref_index} out of range for {len(volumes)} volumes"
        )
    reference = volumes[ref_index]
    geom = reference.geometry
    for v in volumes:
        require_same_geometry(geom, v.geometry, "series volumes")
    targets = [v for i, v in enumerate(volumes) if i != ref_index]

    n_pairs = len(targets)
    u_list = [_warm_start_vectors(t, reference, cfg) for t in targets]
    terms_list = [
        pair_energy_terms(targets[i], reference, DisplacementField(geom, u_list[i]), cfg)
        for i in range(n_pairs)
    ]

    alpha = cfg.rank_weight_alpha
    auto_alpha = alpha is None
    if auto_alpha:
        alpha = 0.0

    def summarize(it, u_list, terms_list, alpha_now):
        data = sum(t[0] for t in terms_list)
        pen = sum(t[1] for t in terms_list)
        sig = singular_values(_stack_rows(u_list))
        nuc = float(sig.sum())
        return RankHistoryRow(
            it, data + pen + alpha_now * nuc, data, pen, nuc, tuple(sig)
        )

    history = [summarize(0, u_list, terms_list, alpha)]

    for it in range(1, cfg.max_iters + 1):
        prev_total = (
            sum(t[0] + t[1] for t in terms_list)
            + alpha * nuclear_norm(_stack_rows(u_list))
        )
        scale = 1.0
        accepted_outer = False
        for _ in range(_MAX_OUTER_HALVINGS + 1):
            stepped = [
                _descent_step(targets[i], reference, u_list[i], terms_list[i],
                              cfg, step_scale=scale)
                for i in range(n_pairs)
            ]
            cand_u = [s[0] for s in stepped]
            cand_terms = [s[1] for s in stepped]
            any_pair_moved = any(s[2] for s in stepped)
            tau = alpha * cfg.step_size * scale
            if tau == 0.0:
                # prox is the identity: per-pair guarantees already hold
                new_u, new_terms = cand_u, cand_terms
                accepted_outer = True
                break
            proxed = svt_prox(_stack_rows(cand_u), tau)
            new_u = _rows_to_vecs(proxed, geom)
            new_terms = [
                pair_energy_terms(targets[i], reference,
                                  DisplacementField(geom, new_u[i]), cfg)
                for i in range(n_pairs)
            ]
            total = (
                sum(t[0] + t[1] for t in new_terms)
                + alpha * nuclear_norm(proxed)
            )
            if (
                np.isfinite(total)
                and total <= prev_total
                and all(t[2] > 0 for t in new_terms)
            ):
                accepted_outer = True
                break
            scale *= 0.5
        if not accepted_outer:
            break
        u_list, terms_list = new_u, new_terms

        if auto_alpha and it == 1:
            data_total = sum(t[0] for t in terms_list)
            nuc = nuclear_norm(_stack_rows(u_list))
            alpha = _AUTO_ALPHA_RATIO * data_total / nuc if nuc > 0 else 0.0
            auto_alpha = False

        history.append(summarize(it, u_list, terms_list, alpha))
        total_now = history[-1].total_objective
        if alpha == 0.0 and not any_pair_moved:
            break
        rel = (prev_total - total_now) / max(prev_total, 1e-30)
        if rel >= 0 and rel < cfg.energy_rel_tol:
            break

    fields = [DisplacementField(geom, u) for u in u_list]
    return RankRegistrationResult(fields, history, float(alpha))


def write_rank_history(path, history) -> None:
    n_sig = len(history[0].sigmas) if history else 0
    header = ["iter", "total_objective", "data_term", "penalty_term", "nuclear_norm"]
    header += [f"sigma{i + 1}" for i in range(n_sig)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in history:
            writer.writerow(
                [row.iteration, repr(row.total_objective), repr(row.data_term),
                 repr(row.penalty_term), repr(row.nuclear)]
                + [repr(s) for s in row.sigmas]
            )
