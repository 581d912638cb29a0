"""Gram-route spectral ops against full-SVD oracles, plus the joint loop."""

import numpy as np
import pytest

from fluorotrack.lowrank import (
    DeformationSetMatrix,
    nuclear_norm,
    register_rank_constrained,
    singular_values,
    svt_prox,
    write_rank_history,
)
from fluorotrack.registration import RegistrationConfig, register_pair
from fluorotrack.volume import DisplacementField, GridGeometry, warp_density

from conftest import gaussian_blob_volume, smooth_random_field, smooth_random_volume


def _geom(dims, spacing=(1.0, 1.0, 1.0)):
    return GridGeometry(dims, spacing, (0.0, 0.0, 0.0))


def _svd_threshold(mat, tau):
    """Reference prox via the full SVD (oracle only, never library code)."""
    u, s, vt = np.linalg.svd(mat, full_matrices=False)
    return (u * np.maximum(s - tau, 0.0)) @ vt


# ---------------------------------------------------------------------------
# spectral operations vs full-SVD oracle


def test_singular_values_match_full_svd(rng):
    for _ in range(20):
        mat = rng.standard_normal((8, 300))
        mine = singular_values(mat)
        ref = np.linalg.svd(mat, compute_uv=False)
        np.testing.assert_allclose(mine, ref, rtol=1e-8)


def test_singular_values_rank_deficient(rng):
    # the Gram route squares the conditioning, so values below
    # sqrt(eps) * sigma1 are numerically zero in either route
    base = rng.standard_normal((3, 200))
    mat = np.vstack([base, base[0] + base[1], 2.0 * base[2]])
    mine = singular_values(mat)
    ref = np.linalg.svd(mat, compute_uv=False)
    np.testing.assert_allclose(mine, ref, rtol=1e-7, atol=1e-6 * ref[0])
    assert mine[3] < 1e-6 * mine[0] and mine[4] < 1e-6 * mine[0]


def test_nuclear_norm_orthogonal_rows_hand_case():
    # orthogonal rows with known lengths: singular values are the lengths
    mat = np.zeros((2, 6))
    mat[0, 0] = 3.0
    mat[1, 1] = 4.0
    assert singular_values(mat) == pytest.approx([4.0, 3.0])
    assert nuclear_norm(mat) == pytest.approx(7.0)


def test_svt_matches_full_svd_oracle(rng):
    for _ in range(20):
        mat = rng.standard_normal((8, 300))
        tau = float(rng.uniform(0.1, 0.9)) * np.linalg.svd(mat, compute_uv=False)[0]
        np.testing.assert_allclose(
            svt_prox(mat, tau), _svd_threshold(mat, tau), rtol=1e-8, atol=1e-10
        )


def test_svt_zero_threshold_is_identity(rng):
    mat = rng.standard_normal((5, 64))
    out = svt_prox(mat, 0.0)
    assert np.array_equal(out, mat)


def test_svt_large_threshold_annihilates(rng):
    mat = rng.standard_normal((4, 50))
    tau = 2.0 * singular_values(mat)[0]
    out = svt_prox(mat, tau)
    assert np.max(np.abs(out)) < 1e-10


def test_svt_nonexpansive(rng):
    # prox operators of convex functions are 1-Lipschitz
    for _ in range(20):
        a = rng.standard_normal((6, 120))
        b = rng.standard_normal((6, 120))
        tau = float(rng.uniform(0.05, 2.0))
        dist_out = np.linalg.norm(svt_prox(a, tau) - svt_prox(b, tau))
        dist_in = np.linalg.norm(a - b)
        assert dist_out <= dist_in + 1e-9


def test_svt_shrinks_singular_values(rng):
    mat = rng.standard_normal((6, 90))
    tau = 0.5 * singular_values(mat)[2]
    out_sig = singular_values(svt_prox(mat, tau))
    in_sig = singular_values(mat)
    np.testing.assert_allclose(out_sig, np.maximum(in_sig - tau, 0.0),
                               rtol=1e-8, atol=1e-9)


def test_svt_rejects_negative_tau(rng):
    with pytest.raises(ValueError):
        svt_prox(rng.standard_normal((3, 10)), -0.1)


# ---------------------------------------------------------------------------
# DeformationSetMatrix round trips


def test_set_matrix_round_trip(rng):
    geom = _geom((5, 4, 3))
    fields = [smooth_random_field(geom, rng, max_mm=1.0) for _ in range(4)]
    stack = DeformationSetMatrix.from_fields(fields)
    assert stack.shape == (4, 3 * geom.voxel_count)
    back = stack.to_fields()
    for orig, rec in zip(fields, back):
        assert np.array_equal(orig.vectors, rec.vectors)


def test_set_matrix_row_order_is_disk_order(rng):
    # row layout must match the field file payload: x fastest, interleaved
    geom = _geom((2, 2, 2))
    vec = np.arange(24, dtype=np.float64).reshape(2, 2, 2, 3)
    stack = DeformationSetMatrix.from_fields([DisplacementField(geom, vec)])
    expect = vec.transpose(2, 1, 0, 3).ravel()
    assert np.array_equal(stack.matrix[0], expect)


def test_set_matrix_geometry_mismatch(rng):
    f1 = smooth_random_field(_geom((4, 4, 4)), rng, max_mm=1.0)
    f2 = smooth_random_field(_geom((4, 4, 5)), rng, max_mm=1.0)
    with pytest.raises(Exception):
        DeformationSetMatrix.from_fields([f1, f2])


def test_svt_wraps_set_matrix(rng):
    geom = _geom((4, 4, 4))
    fields = [smooth_random_field(geom, rng, max_mm=1.0) for _ in range(3)]
    stack = DeformationSetMatrix.from_fields(fields)
    out = svt_prox(stack, 0.1)
    assert isinstance(out, DeformationSetMatrix)
    np.testing.assert_allclose(out.matrix, _svd_threshold(stack.matrix, 0.1),
                               rtol=1e-8, atol=1e-12)


# ---------------------------------------------------------------------------
# joint rank-constrained loop


def _three_volume_series(rng, dims=(12, 12, 12)):
    """Reference blob plus two singly-shifted phases, reference first."""
    geom = _geom(dims)
    ref = gaussian_blob_volume(geom, (5.5, 5.5, 5.5), 2.4, amp=1.0, floor=0.1)
    shift = np.zeros(dims + (3,))
    shift[..., 0] = 0.8
    m1 = warp_density(ref, DisplacementField(geom, -shift))
    shift2 = np.zeros(dims + (3,))
    shift2[..., 1] = 0.8
    m2 = warp_density(ref, DisplacementField(geom, -shift2))
    return [ref, m1, m2]


def test_alpha_zero_matches_independent_pairs(rng):
    # the tau = 0 shortcut plus shared step primitive make the joint loop
    # reproduce register_pair bit for bit (reference is the warped template)
    series = _three_volume_series(rng)
    cfg = RegistrationConfig(penalty_weight=0.05, rank_weight_alpha=0.0,
                             step_size=0.3, max_iters=8, energy_rel_tol=0.0,
                             sobolev_a=0.5, sobolev_b=0.5)
    result = register_rank_constrained(series, 0, cfg)
    for i, target in enumerate(series[1:]):
        u_solo, _ = register_pair(target, series[0], cfg)
        assert np.array_equal(result.fields[i].vectors, u_solo.vectors)
    assert result.alpha == 0.0


def test_alpha_zero_matches_pairs_with_multires_warm_start(rng):
    series = _three_volume_series(rng)
    cfg = RegistrationConfig(penalty_weight=0.05, rank_weight_alpha=0.0,
                             step_size=0.3, max_iters=4, energy_rel_tol=0.0,
                             sobolev_a=0.5, sobolev_b=0.5, multires_levels=2)
    result = register_rank_constrained(series, 0, cfg)
    for i, target in enumerate(series[1:]):
        u_solo, _ = register_pair(target, series[0], cfg)
        assert np.array_equal(result.fields[i].vectors, u_solo.vectors)


def test_reference_index_skipped_and_series_order_kept(rng):
    ref, m1, m2 = _three_volume_series(rng)
    cfg = RegistrationConfig(penalty_weight=0.05, rank_weight_alpha=0.0,
                             step_size=0.3, max_iters=4, energy_rel_tol=0.0,
                             sobolev_a=0.5, sobolev_b=0.5)
    result = register_rank_constrained([m1, ref, m2], 1, cfg)
    assert len(result.fields) == 2
    u1, _ = register_pair(m1, ref, cfg)
    u2, _ = register_pair(m2, ref, cfg)
    assert np.array_equal(result.fields[0].vectors, u1.vectors)
    assert np.array_equal(result.fields[1].vectors, u2.vectors)


def test_recovered_fields_match_generating_direction(rng):
    # the joint loop estimates the displacement that carries the reference
    # onto each phase, so it should land near the fields used to synthesize
    # the series rather than near their inverses
    geom = _geom((12, 12, 12))
    ref = gaussian_blob_volume(geom, (5.5, 5.5, 5.5), 2.4, amp=1.0, floor=0.1)
    gen = np.zeros((12, 12, 12, 3))
    gen[..., 0] = 1.2
    phase = warp_density(ref, DisplacementField(geom, gen))
    cfg = RegistrationConfig(penalty_weight=0.05, rank_weight_alpha=0.0,
                             step_size=0.3, max_iters=120,
                             sobolev_a=0.5, sobolev_b=0.5)
    result = register_rank_constrained([ref, phase], 0, cfg)
    u = result.fields[0].vectors
    core = ref.values > 0.3
    err_gen = np.linalg.norm((u - gen)[core], axis=-1).mean()
    err_inv = np.linalg.norm((u + gen)[core], axis=-1).mean()
    assert err_gen < 0.6
    assert err_gen < 0.5 * err_inv


def test_rank_penalty_shrinks_spectrum(rng):
    series = _three_volume_series(rng)
    base_cfg = dict(penalty_weight=0.05, step_size=0.3, max_iters=25,
                    energy_rel_tol=0.0, sobolev_a=0.5, sobolev_b=0.5)
    free = register_rank_constrained(
        series, 0, RegistrationConfig(rank_weight_alpha=0.0, **base_cfg)
    )
    sig_free = free.history[-1].sigmas
    alpha = 0.5 * free.history[-1].data_term / max(free.history[-1].nuclear, 1e-30)
    tied = register_rank_constrained(
        series, 0, RegistrationConfig(rank_weight_alpha=alpha, **base_cfg)
    )
    sig_tied = tied.history[-1].sigmas
    # a strong penalty should cut the trailing singular value ratio
    assert sig_tied[1] / max(sig_tied[0], 1e-30) < sig_free[1] / sig_free[0]


def test_auto_alpha_sets_positive_weight(rng):
    series = _three_volume_series(rng)
    cfg = RegistrationConfig(penalty_weight=0.05, rank_weight_alpha=None,
                             step_size=0.3, max_iters=6, energy_rel_tol=0.0,
                             sobolev_a=0.5, sobolev_b=0.5)
    result = register_rank_constrained(series, 0, cfg)
    assert result.alpha > 0
    # auto weight is pinned to the post-bootstrap data term scale
    row1 = result.history[1]
    assert result.alpha == pytest.approx(
        0.05 * row1.data_term / row1.nuclear, rel=1e-12
    )


def test_history_rows_and_csv(tmp_path, rng):
    series = _three_volume_series(rng)
    cfg = RegistrationConfig(penalty_weight=0.05, rank_weight_alpha=0.0,
                             step_size=0.3, max_iters=4, energy_rel_tol=0.0,
                             sobolev_a=0.5, sobolev_b=0.5)
    result = register_rank_constrained(series, 0, cfg)
    hist = result.history
    assert hist[0].iteration == 0
    assert all(len(r.sigmas) == 2 for r in hist)
    totals = [r.total_objective for r in hist]
    assert all(b <= a + 1e-12 for a, b in zip(totals, totals[1:]))
    path = tmp_path / "rank.csv"
    write_rank_history(path, hist)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == (
        "iter,total_objective,data_term,penalty_term,nuclear_norm,sigma1,sigma2"
    )
    assert len(lines) == len(hist) + 1
    cells = lines[-1].split(",")
    assert float(cells[4]) == pytest.approx(hist[-1].nuclear, rel=1e-15)


def test_joint_loop_keeps_jacobian_positive(rng):
    series = _three_volume_series(rng)
    cfg = RegistrationConfig(penalty_weight=0.05, rank_weight_alpha=0.02,
                             step_size=0.3, max_iters=10,
                             sobolev_a=0.5, sobolev_b=0.5)
    result = register_rank_constrained(series, 0, cfg)
    from fluorotrack.volume import jacobian_determinant

    for f in result.fields:
        assert jacobian_determinant(f).min() > 0


def test_short_series_and_bad_ref_index_rejected(rng):
    geom = _geom((6, 6, 6))
    ref = smooth_random_volume(geom, rng)
    other = smooth_random_volume(geom, rng)
    with pytest.raises(ValueError):
        register_rank_constrained([ref], 0, RegistrationConfig())
    with pytest.raises(ValueError):
        register_rank_constrained([ref, other], 2, RegistrationConfig())
    with pytest.raises(ValueError):
        register_rank_constrained([ref, other], -1, RegistrationConfig())
