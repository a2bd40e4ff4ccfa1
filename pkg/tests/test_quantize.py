"""Rule-based quantizers, codebooks, BST assignment, and row-wise matrices."""

import numpy as np
import pytest

from helpers import nearest_code_indices

from multibit import (
    Codebook,
    alternating_quantize,
    assign_codes,
    balanced_quantize,
    bst_assign,
    build_codebook,
    greedy_quantize,
    quantize_matrix_rowwise,
    refined_greedy_quantize,
    refit_coefficients,
    relative_mse,
    ternary_quantize,
    uniform_quantize,
)
from multibit.quantize import MAX_CODEBOOK_BITS


class TestUniformQuantize:
    def test_normalized_endpoint_is_identity(self):
        q, scale = uniform_quantize([0.3], 2)
        assert scale == 0.3
        np.testing.assert_allclose(q, [0.3], atol=1e-15)

    def test_raw_scale_hand_value(self):
        q, scale = uniform_quantize([0.3], 2, normalize=False)
        assert scale == 1.0
        assert q[0] == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_extremes_map_to_themselves(self):
        q, _ = uniform_quantize([1.0, -1.0], 3, normalize=False)
        np.testing.assert_array_equal(q, [1.0, -1.0])

    def test_zero_vector_tie_goes_up(self):
        # round-half-away-from-zero sends 1.5 -> 2, so 0 lands on +1/3
        q, scale = uniform_quantize([0.0, 0.0, 0.0], 2)
        assert scale == 1.0
        np.testing.assert_allclose(q, [1.0 / 3.0] * 3, atol=1e-15)

    def test_outputs_on_level_grid(self, rng):
        for k in (1, 2, 3, 4):
            x = rng.uniform(-5, 5, size=200)
            q, scale = uniform_quantize(x, k)
            levels = scale * 2.0 * (np.arange(2**k) / (2**k - 1) - 0.5)
            dist = np.min(np.abs(q[:, None] - levels[None, :]), axis=1)
            assert np.max(dist) < 1e-12

    def test_empty_input(self):
        with pytest.raises(ValueError, match="empty"):
            uniform_quantize([], 2)

    def test_non_finite_input(self):
        with pytest.raises(ValueError, match="finite"):
            uniform_quantize([1.0, np.nan], 2)


class TestBalancedQuantize:
    def test_four_point_hand_case(self):
        np.testing.assert_allclose(
            balanced_quantize([1.0, 2.0, 3.0, 4.0], 1), [1.5, 1.5, 3.5, 3.5]
        )

    def test_symmetric_two_mass_is_fixed_point(self):
        x = np.array([-0.7, -0.7, 0.7, 0.7])
        np.testing.assert_allclose(balanced_quantize(x, 1), x, atol=1e-12)

    def test_too_few_samples(self):
        with pytest.raises(ValueError, match="too few samples"):
            balanced_quantize([1.0, 2.0, 3.0], 2)

    def test_constant_data_maps_to_itself(self):
        np.testing.assert_allclose(
            balanced_quantize([2.0, 2.0, 2.0, 2.0], 1), [2.0] * 4
        )

    def test_worse_than_alternating_on_gaussian(self, rng):
        x = rng.standard_normal(20_000)
        bal = relative_mse(x, balanced_quantize(x, 2))
        alt = relative_mse(x, alternating_quantize(x, 2).reconstruct())
        assert alt < bal


class TestGreedyQuantize:
    def test_hand_trace(self):
        code = greedy_quantize([1.0, 2.0, 4.0], 2)
        np.testing.assert_allclose(code.alphas, [7.0 / 3.0, 10.0 / 9.0])
        assert code.signs().tolist() == [[1, 1, 1], [-1, -1, 1]]
        np.testing.assert_allclose(
            code.reconstruct(), [11.0 / 9.0, 11.0 / 9.0, 31.0 / 9.0]
        )

    def test_constant_vector_single_bit_exact(self):
        code = greedy_quantize([0.8, 0.8, 0.8], 1)
        np.testing.assert_allclose(code.alphas, [0.8])
        assert code.signs().tolist() == [[1, 1, 1]]
        np.testing.assert_allclose(code.reconstruct(), [0.8] * 3)

    def test_two_entry_exact(self):
        code = greedy_quantize([0.5, -1.5], 2)
        np.testing.assert_allclose(code.alphas, [1.0, 0.5])
        assert code.signs().tolist() == [[1, -1], [-1, -1]]
        np.testing.assert_allclose(code.reconstruct(), [0.5, -1.5], atol=1e-15)

    def test_residual_never_grows_with_bits(self, rng):
        w = rng.standard_normal(128)
        prev = float(w @ w)
        for k in (1, 2, 3, 4, 5):
            err = w - greedy_quantize(w, k).reconstruct()
            cur = float(err @ err)
            assert cur <= prev + 1e-9
            prev = cur

    def test_scale_equivariance(self, rng):
        w = rng.standard_normal(64)
        base = greedy_quantize(w, 3)
        scaled = greedy_quantize(2.5 * w, 3)
        np.testing.assert_allclose(scaled.alphas, 2.5 * base.alphas, rtol=1e-12)
        assert np.array_equal(scaled.signs(), base.signs())

    def test_zero_vector_convention(self):
        code = greedy_quantize(np.zeros(5), 2)
        np.testing.assert_array_equal(code.alphas, [0.0, 0.0])
        assert np.all(code.signs() == 1)


class TestRefitCoefficients:
    def test_hand_normal_equations(self):
        planes = np.array([[1, 1, 1], [-1, -1, 1]])
        coeffs, ridge = refit_coefficients(planes, [1.0, 2.0, 4.0])
        assert not ridge
        np.testing.assert_allclose(coeffs, [2.75, 1.25])

    def test_single_plane_gives_mean(self, rng):
        w = rng.standard_normal(40)
        coeffs, ridge = refit_coefficients(np.ones((1, 40)), w)
        assert not ridge
        assert coeffs[0] == pytest.approx(w.mean(), rel=1e-12)

    def test_duplicate_planes_trigger_ridge(self, rng):
        w = rng.standard_normal(32)
        p = np.where(rng.standard_normal(32) >= 0, 1.0, -1.0)
        coeffs, ridge = refit_coefficients(np.stack([p, p]), w)
        assert ridge
        err2 = w - (coeffs[0] + coeffs[1]) * p
        single, _ = refit_coefficients(p[None, :], w)
        err1 = w - single[0] * p
        assert float(err2 @ err2) == pytest.approx(float(err1 @ err1), abs=1e-6)

    def test_accepts_packed_planes(self, rng):
        from multibit import pack_signs

        w = rng.standard_normal(20)
        signs = rng.choice([-1.0, 1.0], size=(2, 20))
        direct, _ = refit_coefficients(signs, w)
        packed, _ = refit_coefficients([pack_signs(s) for s in signs], w)
        np.testing.assert_allclose(packed, direct, rtol=1e-12)

    def test_more_planes_than_entries_rejected(self):
        with pytest.raises(ValueError, match="more planes"):
            refit_coefficients(np.ones((3, 2)), [1.0, 2.0])


class TestCodebook:
    def test_two_coefficients(self):
        book = build_codebook([2.0, 1.0])
        assert book.values.tolist() == [-3.0, -1.0, 1.0, 3.0]
        assert book.patterns.tolist() == [[-1, -1], [-1, 1], [1, -1], [1, 1]]

    def test_single_coefficient(self):
        book = build_codebook([1.0])
        assert book.values.tolist() == [-1.0, 1.0]

    def test_tied_values_keep_lexicographic_pattern_order(self):
        book = build_codebook([1.0, 1.0])
        assert book.values.tolist() == [-2.0, 0.0, 0.0, 2.0]
        assert book.patterns.tolist() == [[-1, -1], [-1, 1], [1, -1], [1, 1]]

    def test_large_k_guard(self):
        with pytest.raises(ValueError, match="codebook too large"):
            build_codebook(np.linspace(1.0, 0.5, MAX_CODEBOOK_BITS + 1))

    def test_non_canonical_rejected(self):
        with pytest.raises(ValueError, match="descending"):
            build_codebook([1.0, 2.0])
        with pytest.raises(ValueError, match="nonnegative"):
            build_codebook([1.0, -0.5])

    def test_values_not_monotone_in_pattern_index_for_k3(self):
        # 100 pattern sits below 011 for these coefficients; the sort matters
        book = build_codebook([3.0, 2.0, 2.0])
        assert np.all(np.diff(book.values) >= 0)


class TestBstAssign:
    def test_fig_case_inside_interval(self):
        book = build_codebook([2.0, 1.0])
        assert bst_assign(0.4, book) == 2

    def test_tie_on_boundary_goes_up(self):
        book = build_codebook([2.0, 1.0])
        assert bst_assign(-2.0, book) == 1  # midpoint of -3 and -1

    def test_far_right(self):
        book = build_codebook([2.0, 1.0])
        assert bst_assign(1e6, book) == 3

    def test_codebook_type_enforces_power_of_two(self):
        with pytest.raises(ValueError, match="2\\^k"):
            Codebook(np.array([-1.0, 0.0, 1.0]),
                     np.array([[-1, -1], [-1, 1], [1, 1]], dtype=np.int8))

    def test_exhaustive_optimality(self, rng):
        """Every assignment must be a true nearest code."""
        for _ in range(300):
            k = int(rng.integers(1, 5))
            alphas = np.sort(rng.uniform(0.0, 2.0, size=k))[::-1]
            book = build_codebook(alphas)
            for w in rng.uniform(-1.5, 1.5, size=6) * (alphas.sum() + 0.5):
                idx = bst_assign(float(w), book)
                assert idx in nearest_code_indices(float(w), book.values)

    def test_matches_boundary_count_rule(self, rng):
        for _ in range(100):
            k = int(rng.integers(1, 5))
            alphas = np.sort(np.abs(rng.standard_normal(k)))[::-1]
            book = build_codebook(alphas)
            boundaries = (book.values[:-1] + book.values[1:]) / 2.0
            w = float(rng.standard_normal() * (alphas.sum() + 1.0))
            assert bst_assign(w, book) == int(
                np.searchsorted(boundaries, w, side="right")
            )


class TestAssignCodes:
    def test_hand_case(self):
        book = build_codebook([2.75, 1.25])
        signs = assign_codes([1.0, 2.0, 4.0], book)
        assert signs.tolist() == [[1, 1, 1], [-1, -1, 1]]

    def test_zero_entries_take_upper_half(self):
        book = build_codebook([2.0, 1.0])
        signs = assign_codes(np.zeros(4), book)
        # 0 >= 0 picks the upper half, then the lower code there: (+, -)
        assert np.all(signs[0] == 1)
        assert np.all(signs[1] == -1)

    def test_exact_codebook_value_is_lossless(self):
        book = build_codebook([2.0, 1.0])
        signs = assign_codes([-3.0, -1.0, 1.0, 3.0], book)
        recon = 2.0 * signs[0] + 1.0 * signs[1]
        np.testing.assert_array_equal(recon, [-3.0, -1.0, 1.0, 3.0])

    def test_agrees_with_scalar_bst(self, rng):
        for _ in range(50):
            k = int(rng.integers(1, 5))
            alphas = np.sort(np.abs(rng.standard_normal(k)) + 1e-3)[::-1]
            book = build_codebook(alphas)
            w = rng.standard_normal(37) * alphas.sum()
            signs = assign_codes(w, book)
            for j, wj in enumerate(w):
                expected = book.patterns[bst_assign(float(wj), book)]
                assert np.array_equal(signs[:, j], expected)

    def test_two_bit_closed_form(self, rng):
        """Canonical 2-bit assignment equals sign(w), sign(w - a1*b1)."""
        for _ in range(50):
            a1, a2 = np.sort(rng.uniform(0.05, 2.0, size=2))[::-1]
            w = rng.standard_normal(64)
            signs = assign_codes(w, build_codebook([a1, a2]))
            b1 = np.where(w >= 0, 1, -1)
            b2 = np.where(w - a1 * b1 >= 0, 1, -1)
            assert np.array_equal(signs[0], b1)
            assert np.array_equal(signs[1], b2)


class TestCanonicalization:
    def test_sign_flip_preserves_reconstruction_bitwise(self, rng):
        """Negating a coefficient and flipping its plane is exact in IEEE
        arithmetic, so canonical and raw forms reconstruct identically."""
        for _ in range(30):
            k = int(rng.integers(1, 5))
            n = int(rng.integers(1, 40))
            coeffs = rng.standard_normal(k)  # arbitrary signs
            planes = rng.choice([-1.0, 1.0], size=(k, n))
            raw = np.zeros(n)
            canon = np.zeros(n)
            for i in range(k):
                raw += coeffs[i] * planes[i]
                flip = 1.0 if coeffs[i] >= 0 else -1.0
                canon += abs(coeffs[i]) * (flip * planes[i])
            assert np.array_equal(raw, canon)

    def test_refit_output_canonicalized_by_alternating(self, rng):
        # alternating results are always canonical even when the raw
        # least-squares coefficients come out negative or unordered
        for _ in range(50):
            w = rng.standard_normal(12)
            code = alternating_quantize(w, 3)
            assert np.all(code.alphas >= 0)
            assert np.all(np.diff(code.alphas) <= 0)


class TestTernaryQuantize:
    def test_hand_case(self):
        code = ternary_quantize([1.0, 0.2, -0.1, -1.0, 0.3])
        assert code.alpha == pytest.approx(1.0)
        assert code.trits.tolist() == [1, 0, 0, -1, 0]

    def test_antisymmetric_pair_exact(self):
        code = ternary_quantize([0.9, -0.9])
        assert code.alpha == pytest.approx(0.9)
        assert code.trits.tolist() == [1, -1]
        np.testing.assert_allclose(code.reconstruct(), [0.9, -0.9])

    def test_outlier_dominates(self):
        code = ternary_quantize([0.1, 0.1, 10.0])
        assert code.trits.tolist() == [0, 0, 1]
        assert code.alpha == pytest.approx(10.0)

    def test_all_zero_vector(self):
        code = ternary_quantize(np.zeros(4))
        assert code.alpha == 0.0


class TestRelativeMse:
    def test_perfect_reconstruction(self, rng):
        w = rng.standard_normal(10)
        assert relative_mse(w, w) == 0.0

    def test_zero_reconstruction_is_one(self, rng):
        w = rng.standard_normal(10)
        assert relative_mse(w, np.zeros(10)) == pytest.approx(1.0)

    def test_hand_value(self):
        assert relative_mse([1.0, 2.0, 4.0], [1.5, 1.5, 4.0]) == pytest.approx(
            0.5 / 21.0
        )

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError, match="zero-norm"):
            relative_mse(np.zeros(3), np.ones(3))


class TestQuantizeMatrixRowwise:
    def test_single_row_equals_vector_path(self, rng):
        w = rng.standard_normal(70)
        q = quantize_matrix_rowwise(w[None, :], 3)
        code = alternating_quantize(w, 3)
        row = q.row_code(0)
        assert np.array_equal(
            np.float32(code.alphas), q.row_alphas[0]
        )
        assert np.array_equal(row.signs(), code.signs())

    def test_identical_rows_identical_codes(self, rng):
        row = rng.standard_normal(40)
        q = quantize_matrix_rowwise(np.stack([row, row, row]), 2)
        assert np.array_equal(q.row_alphas[0], q.row_alphas[1])
        assert np.array_equal(q.plane_words[:, 0], q.plane_words[:, 2])

    def test_block_size_invariance(self, rng):
        W = rng.standard_normal((11, 33))
        a = quantize_matrix_rowwise(W, 2, block_rows=3)
        b = quantize_matrix_rowwise(W, 2, block_rows=None)
        assert np.array_equal(a.row_alphas, b.row_alphas)
        assert np.array_equal(a.plane_words, b.plane_words)

    def test_block_size_invariance_numpy_engine(self, rng):
        # k above the kernel limit exercises the numpy batch path
        W = rng.standard_normal((7, 40))
        a = quantize_matrix_rowwise(W, 9, block_rows=2)
        b = quantize_matrix_rowwise(W, 9, block_rows=None)
        assert np.array_equal(a.row_alphas, b.row_alphas)
        assert np.array_equal(a.plane_words, b.plane_words)

    def test_beats_greedy_per_row(self, rng):
        W = rng.standard_normal((8, 16))
        alt = quantize_matrix_rowwise(W, 2)
        gre = quantize_matrix_rowwise(W, 2, method="greedy")
        for r in range(8):
            ra = relative_mse(W[r], alt.reconstruct()[r])
            rg = relative_mse(W[r], gre.reconstruct()[r])
            assert ra <= rg + 1e-12

    def test_row_error_context(self, monkeypatch):
        import multibit.quantize as qz

        def boom(*args, **kwargs):
            raise ValueError("engine failure")

        monkeypatch.setattr(qz, "_alternating_rows", boom)
        with pytest.raises(ValueError, match=r"rows 0\.\.0: engine failure"):
            qz.quantize_matrix_rowwise(np.ones((3, 4)), 2, block_rows=1)

    def test_bit_count_validated_up_front(self):
        with pytest.raises(ValueError, match="codebook too large"):
            quantize_matrix_rowwise(np.array([[1.0, 2.0]]), 40)

    def test_unknown_method(self):
        with pytest.raises(ValueError, match="unknown method"):
            quantize_matrix_rowwise(np.ones((1, 4)), 2, method="magic")

    def test_uniform_method_reproduces_uniform_levels(self, rng):
        W = rng.standard_normal((5, 24))
        q = quantize_matrix_rowwise(W, 3, method="uniform")
        recon = q.reconstruct()
        for r in range(5):
            expected, _ = uniform_quantize(W[r], 3)
            np.testing.assert_allclose(recon[r], expected, atol=1e-6)

    def test_ternary_method_reproduces_ternary(self, rng):
        W = rng.standard_normal((4, 30))
        q = quantize_matrix_rowwise(W, 2, method="ternary")
        recon = q.reconstruct()
        for r in range(4):
            expected = ternary_quantize(W[r]).reconstruct()
            np.testing.assert_allclose(recon[r], expected, atol=1e-6)

    def test_refined_method_matches_vector_refined(self, rng):
        w = rng.standard_normal(50)
        q = quantize_matrix_rowwise(w[None, :], 3, method="refined")
        code = refined_greedy_quantize(w, 3)
        assert np.array_equal(q.row_code(0).signs(), code.signs())
