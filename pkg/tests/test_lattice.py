"""Tests for the lattice filter against its dense quadratic oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latticefdr.errors import DegenerateInputError, ProblemTooLargeError
from latticefdr.lattice import (
    PermutohedralLattice,
    build_embedding,
    build_lattice,
    exact_gaussian_filter,
    lattice_filter,
)


class TestEmbedding:
    def test_d1_column_is_plus_minus_inverse_sqrt2(self):
        e = build_embedding(1)
        inv_sqrt2 = 1.0 / np.sqrt(2.0)
        np.testing.assert_allclose(e[:, 0], [inv_sqrt2, -inv_sqrt2], atol=1e-15)

    @pytest.mark.parametrize("d", [1, 2, 3, 4, 8])
    def test_columns_orthonormal(self, d):
        e = build_embedding(d)
        np.testing.assert_allclose(e.T @ e, np.eye(d), atol=1e-12)

    @pytest.mark.parametrize("d", [1, 3, 4])
    def test_embedded_points_sum_to_zero(self, d):
        rng = np.random.default_rng(101)
        p = rng.standard_normal((50, d))
        embedded = p @ build_embedding(d).T
        np.testing.assert_allclose(embedded.sum(axis=1), 0.0, atol=1e-10)

    def test_rejects_dimension_out_of_range(self):
        with pytest.raises(ProblemTooLargeError):
            build_embedding(9)
        with pytest.raises(ProblemTooLargeError):
            build_embedding(0)


class TestExactFilter:
    def test_single_point_keeps_its_value(self):
        out = exact_gaussian_filter(np.array([[0.4, -2.0, 1.0]]), np.array([7.0]))
        np.testing.assert_allclose(out, [7.0], atol=1e-15)

    def test_coincident_points_exchange_unit_weight(self):
        pos = np.array([[1.5, 0.5], [1.5, 0.5]])
        out = exact_gaussian_filter(pos, np.array([1.0, 0.0]))
        np.testing.assert_allclose(out, [1.0, 1.0], atol=1e-14)

    def test_unit_line_pair_weight(self):
        # exp(-|2-0|^2 / 2) = e^{-2}
        pos = np.array([[0.0], [2.0]])
        out = exact_gaussian_filter(pos, np.array([1.0, 0.0]))
        np.testing.assert_allclose(out, [1.0, 0.1353352832366127], atol=1e-12)

    def test_kernel_is_symmetric_bilinear(self):
        rng = np.random.default_rng(7)
        pos = rng.uniform(0, 2.5, (80, 3))
        u = rng.standard_normal(80)
        v = rng.standard_normal(80)
        left = v @ exact_gaussian_filter(pos, u)
        right = u @ exact_gaussian_filter(pos, v)
        assert abs(left - right) <= 1e-8 * max(abs(left), abs(right))

    def test_refuses_oversized_problems(self):
        pos = np.zeros((11, 2))
        with pytest.raises(ProblemTooLargeError):
            exact_gaussian_filter(pos, np.zeros(11), max_points=10)

    def test_rejects_mismatched_values(self):
        pos = np.zeros((3, 2))
        with pytest.raises(DegenerateInputError):
            exact_gaussian_filter(pos, np.zeros(4))

    def test_rejects_nonfinite_positions(self):
        pos = np.array([[0.0, np.inf]])
        with pytest.raises(DegenerateInputError):
            exact_gaussian_filter(pos, np.zeros(1))


class TestLatticeGeometry:
    def test_barycentric_weights_in_simplex(self):
        rng = np.random.default_rng(11)
        lat = build_lattice(rng.uniform(-3, 3, (200, 4)))
        w = lat.interp_weights
        assert np.all(w >= -1e-10)
        assert np.all(w <= 1 + 1e-10)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-10)

    def test_keys_reconstruct_embedded_points(self):
        # the simplex decomposition is exact: the barycentric combination
        # of the vertex keys recovers the embedded point
        rng = np.random.default_rng(12)
        pos = rng.uniform(-2, 2, (150, 3))
        lat = build_lattice(pos)
        elevated = PermutohedralLattice._elevate(pos)
        rem0, ranks = PermutohedralLattice._round_and_rank(elevated, 3)
        from latticefdr.lattice import _canonical_vertices

        can = _canonical_vertices(3)
        keys = rem0[:, None, :] + np.transpose(can[:, ranks], (1, 0, 2))
        recon = np.einsum("mk,mkc->mc", lat.interp_weights, keys.astype(float))
        np.testing.assert_allclose(recon, elevated, atol=1e-8)

    def test_vertex_keys_sum_to_zero_d4(self):
        rng = np.random.default_rng(13)
        pos = rng.uniform(-4, 4, (100, 4))
        elevated = PermutohedralLattice._elevate(pos)
        rem0, ranks = PermutohedralLattice._round_and_rank(elevated, 4)
        from latticefdr.lattice import _canonical_vertices

        can = _canonical_vertices(4)
        keys = rem0[:, None, :] + np.transpose(can[:, ranks], (1, 0, 2))
        assert np.all(keys.sum(axis=2) == 0)

    def test_simplex_vertices_cover_distinct_remainders(self):
        rng = np.random.default_rng(14)
        pos = rng.uniform(-4, 4, (60, 3))
        elevated = PermutohedralLattice._elevate(pos)
        rem0, ranks = PermutohedralLattice._round_and_rank(elevated, 3)
        # ranks must be a permutation of 0..d per point
        assert np.all(np.sort(ranks, axis=1) == np.arange(4)[None, :])

    def test_rounding_finds_nearest_remainder_zero_point(self):
        # brute force over candidate roundings of each coordinate
        rng = np.random.default_rng(15)
        pos = rng.uniform(-2, 2, (40, 3))
        elevated = PermutohedralLattice._elevate(pos)
        rem0, _ = PermutohedralLattice._round_and_rank(elevated, 3)
        d1 = 4
        for i in range(elevated.shape[0]):
            base = np.floor(elevated[i] / d1) * d1
            best = None
            for bump in np.ndindex(*([2] * d1)):
                cand = base + d1 * np.array(bump)
                if cand.sum() != 0:
                    continue
                dist = np.sum((cand - elevated[i]) ** 2)
                if best is None or dist < best:
                    best = dist
            got = np.sum((rem0[i] - elevated[i]) ** 2)
            assert best is not None
            np.testing.assert_allclose(got, best, rtol=1e-12)

    def test_point_on_vertex_gets_unit_weight(self):
        # remainder-0 lattice points are fixed points of the construction;
        # build one by splatting an arbitrary input and reusing its vertex
        pos = np.array([[0.37, -1.4, 0.9]])
        elevated = PermutohedralLattice._elevate(pos)
        rem0, _ = PermutohedralLattice._round_and_rank(elevated, 3)
        # invert the elevation for the rem0 key: solve E s x = rem0
        emb = build_embedding(3)
        from latticefdr.lattice import _ELEVATION_SCALE

        x = (emb.T @ rem0[0]) / ((3 + 1) * _ELEVATION_SCALE)
        lat = build_lattice(x[None, :])
        w = np.sort(lat.interp_weights[0])
        np.testing.assert_allclose(w[-1], 1.0, atol=1e-9)
        np.testing.assert_allclose(w[:-1], 0.0, atol=1e-9)

    def test_rejects_bad_position_shapes(self):
        with pytest.raises(DegenerateInputError):
            build_lattice(np.zeros((0, 3)))
        with pytest.raises(DegenerateInputError):
            build_lattice(np.zeros(5))
        with pytest.raises(ProblemTooLargeError):
            build_lattice(np.zeros((5, 9)))


class TestLatticeFilter:
    def test_single_point_identity(self):
        lat = build_lattice(np.array([[0.3, -1.2, 0.7]]))
        out = lattice_filter(lat, np.array([2.5]))
        np.testing.assert_allclose(out, [2.5], atol=1e-12)

    def test_coincident_pair_matches_exact(self):
        lat = build_lattice(np.array([[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]]))
        out = lattice_filter(lat, np.array([1.0, 0.0]))
        np.testing.assert_allclose(out, [1.0, 1.0], atol=1e-10)

    def test_constant_preserved_by_normalized_mode(self):
        rng = np.random.default_rng(21)
        lat = build_lattice(rng.uniform(0, 2.5, (300, 3)))
        out = lattice_filter(lat, np.full(300, 3.7), normalize=True)
        np.testing.assert_allclose(out, 3.7, atol=1e-6)

    def test_linearity(self):
        rng = np.random.default_rng(22)
        lat = build_lattice(rng.uniform(0, 2.5, (200, 4)))
        u = rng.standard_normal(200)
        v = rng.standard_normal(200)
        combo = lattice_filter(lat, 2.0 * u - 0.5 * v)
        parts = 2.0 * lattice_filter(lat, u) - 0.5 * lattice_filter(lat, v)
        scale = np.abs(parts).max()
        np.testing.assert_allclose(combo, parts, atol=1e-8 * scale)

    def test_self_weight_matches_measured_diagonal(self):
        # filtering a one-hot channel reads out one kernel column; its
        # i-th entry over the closed-form self-weight must come back 1
        rng = np.random.default_rng(23)
        pos = rng.uniform(0, 2.0, (40, 3))
        lat = build_lattice(pos)
        for i in (0, 17, 39):
            e = np.zeros(40)
            e[i] = 1.0
            out = lattice_filter(lat, e)
            np.testing.assert_allclose(out[i], 1.0, rtol=1e-9)

    @pytest.mark.parametrize("d", [3, 4])
    def test_oracle_agreement(self, d):
        rng = np.random.default_rng(30 + d)
        for m in (100, 500, 1000):
            pos = rng.uniform(0, 2.5, (m, d))
            vals = rng.standard_normal(m)
            lat = build_lattice(pos)
            out = lattice_filter(lat, vals)
            ref = exact_gaussian_filter(pos, vals, max_points=2000)
            rel = np.linalg.norm(out - ref) / np.linalg.norm(ref)
            assert rel <= 0.05, f"d={d} m={m}: relative L2 {rel:.4f}"

    def test_oracle_agreement_500_random_d4(self):
        rng = np.random.default_rng(44)
        pos = rng.uniform(0, 2.5, (500, 4))
        vals = rng.standard_normal(500)
        out = lattice_filter(build_lattice(pos), vals)
        ref = exact_gaussian_filter(pos, vals, max_points=2000)
        rel = np.linalg.norm(out - ref) / np.linalg.norm(ref)
        assert rel <= 0.05

    def test_multichannel_matches_per_channel(self):
        rng = np.random.default_rng(25)
        lat = build_lattice(rng.uniform(0, 2.0, (150, 3)))
        vals = rng.standard_normal((150, 3))
        stacked = lattice_filter(lat, vals)
        for c in range(3):
            np.testing.assert_array_equal(stacked[:, c], lattice_filter(lat, vals[:, c]))

    def test_row_permutation_is_bitwise_equivariant(self):
        rng = np.random.default_rng(26)
        pos = rng.uniform(0, 2.5, (120, 3))
        vals = rng.standard_normal(120)
        perm = rng.permutation(120)
        out = lattice_filter(build_lattice(pos), vals)
        out_perm = lattice_filter(build_lattice(pos[perm]), vals[perm])
        assert np.array_equal(out[perm], out_perm)

    def test_rejects_wrong_value_length(self):
        lat = build_lattice(np.zeros((4, 2)))
        with pytest.raises(DegenerateInputError):
            lattice_filter(lat, np.zeros(5))


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    m=st.integers(2, 40),
    d=st.integers(1, 4),
)
def test_barycentric_invariants_hold_for_random_clouds(seed, m, d):
    rng = np.random.default_rng(seed)
    lat = build_lattice(rng.uniform(-3, 3, (m, d)))
    w = lat.interp_weights
    assert np.all(w >= -1e-10)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-10)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_normalized_filter_output_within_value_range(seed):
    # a weighted average with nonnegative weights cannot escape the hull
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0, 2.0, (60, 3))
    vals = rng.standard_normal(60)
    out = lattice_filter(build_lattice(pos), vals, normalize=True)
    assert out.min() >= vals.min() - 1e-9
    assert out.max() <= vals.max() + 1e-9
