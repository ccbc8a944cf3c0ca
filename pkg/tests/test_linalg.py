import math

import numpy as np
import pytest

from fedsrd.errors import EmptyInputError, InvalidInputError, InvalidRankError
from fedsrd.linalg import (
    col_norms,
    kurtosis,
    pseudoinverse,
    quantile_threshold,
    rank_r_approx,
    row_norms,
    svd_full,
)


def frobenius(m):
    return float(np.linalg.norm(m))


class TestSvdFull:
    def test_identity_singular_values(self):
        factors = svd_full(np.eye(3))
        np.testing.assert_allclose(factors.singular_values, [1.0, 1.0, 1.0])

    def test_diagonal_singular_values(self):
        factors = svd_full(np.diag([3.0, 2.0, 1.0]))
        np.testing.assert_allclose(factors.singular_values, [3.0, 2.0, 1.0])

    def test_reconstruction_error(self):
        rng = np.random.default_rng(11)
        m = rng.standard_normal((8, 5))
        u, s, vh = svd_full(m)
        rebuilt = (u * s) @ vh
        assert frobenius(rebuilt - m) / frobenius(m) < 1e-9

    def test_factor_invariants(self):
        rng = np.random.default_rng(12)
        for shape in [(4, 4), (9, 3), (3, 9), (7, 5)]:
            u, s, vh = svd_full(rng.standard_normal(shape))
            k = min(shape)
            assert s.shape == (k,)
            assert np.all(s[:-1] >= s[1:]) and np.all(s >= 0)
            np.testing.assert_allclose(u.T @ u, np.eye(k), atol=1e-10)
            np.testing.assert_allclose(vh @ vh.T, np.eye(k), atol=1e-10)

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInputError):
            svd_full(np.array([[1.0, np.nan], [0.0, 1.0]]))


class TestRankRApprox:
    def test_rank_one_input_is_exact(self):
        rng = np.random.default_rng(21)
        m = np.outer(rng.standard_normal(6), rng.standard_normal(4))
        assert frobenius(rank_r_approx(m, 1) - m) < 1e-10

    def test_diagonal_truncation(self):
        approx = rank_r_approx(np.diag([3.0, 2.0, 1.0]), 2)
        np.testing.assert_allclose(approx, np.diag([3.0, 2.0, 0.0]), atol=1e-12)
        assert abs(frobenius(np.diag([3.0, 2.0, 1.0]) - approx) - 1.0) < 1e-12

    def test_error_matches_tail_energy(self):
        rng = np.random.default_rng(22)
        m = rng.standard_normal((10, 6))
        s = svd_full(m).singular_values
        err = frobenius(m - rank_r_approx(m, 3))
        assert abs(err - math.sqrt(float(np.sum(s[3:] ** 2)))) < 1e-8

    def test_eckart_young_across_shapes_and_ranks(self):
        # tail singular-value energy is the optimal Frobenius error
        rng = np.random.default_rng(23)
        for _ in range(25):
            rows = int(rng.integers(1, 33))
            cols = int(rng.integers(1, 33))
            m = rng.standard_normal((rows, cols))
            s = svd_full(m).singular_values
            for r in range(1, min(rows, cols) + 1):
                err = frobenius(m - rank_r_approx(m, r))
                tail = math.sqrt(float(np.sum(s[r:] ** 2)))
                assert abs(err - tail) < 1e-8

    @pytest.mark.parametrize("r", [0, 4, -1])
    def test_rank_out_of_range(self, r):
        with pytest.raises(InvalidRankError):
            rank_r_approx(np.eye(3), r)


def moore_penrose_conditions(m, pinv, tol=1e-8):
    assert np.allclose(m @ pinv @ m, m, atol=tol)
    assert np.allclose(pinv @ m @ pinv, pinv, atol=tol)
    assert np.allclose((m @ pinv).T, m @ pinv, atol=tol)
    assert np.allclose((pinv @ m).T, pinv @ m, atol=tol)


class TestPseudoinverse:
    def test_identity(self):
        np.testing.assert_allclose(pseudoinverse(np.eye(4)), np.eye(4), atol=1e-12)

    def test_diagonal(self):
        np.testing.assert_allclose(
            pseudoinverse(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]), atol=1e-12
        )

    def test_left_inverse_of_tall_full_rank(self):
        rng = np.random.default_rng(31)
        m = rng.standard_normal((8, 3))
        np.testing.assert_allclose(pseudoinverse(m) @ m, np.eye(3), atol=1e-8)

    def test_conditions_square_tall_wide_deficient(self):
        rng = np.random.default_rng(32)
        cases = [
            rng.standard_normal((5, 5)),
            rng.standard_normal((9, 4)),
            rng.standard_normal((4, 9)),
            rng.standard_normal((6, 2)) @ rng.standard_normal((2, 6)),  # rank 2 of 6
        ]
        for m in cases:
            moore_penrose_conditions(m, pseudoinverse(m))

    def test_zero_matrix(self):
        np.testing.assert_array_equal(pseudoinverse(np.zeros((3, 2))), np.zeros((2, 3)))

    def test_negative_tol_rejected(self):
        with pytest.raises(InvalidInputError):
            pseudoinverse(np.eye(2), tol=-1e-3)


class TestQuantileThreshold:
    def test_endpoints_and_median(self):
        values = [1.0, 2.0, 3.0, 4.0]
        assert quantile_threshold(values, 0.0) == 1.0
        assert quantile_threshold(values, 1.0) == 4.0
        assert quantile_threshold(values, 0.5) == 2.5

    def test_monotone_in_q(self):
        rng = np.random.default_rng(41)
        values = rng.standard_normal(37)
        qs = np.linspace(0, 1, 21)
        thresholds = [quantile_threshold(values, q) for q in qs]
        assert all(a <= b + 1e-15 for a, b in zip(thresholds, thresholds[1:]))

    def test_permutation_invariant(self):
        rng = np.random.default_rng(42)
        values = rng.standard_normal(25)
        shuffled = rng.permutation(values)
        for q in (0.0, 0.25, 0.6, 1.0):
            assert quantile_threshold(values, q) == quantile_threshold(shuffled, q)

    def test_empty_rejected(self):
        with pytest.raises(EmptyInputError):
            quantile_threshold([], 0.5)

    def test_bad_q_rejected(self):
        with pytest.raises(InvalidInputError):
            quantile_threshold([1.0], 1.5)


class TestKurtosis:
    def test_constant_is_degenerate(self):
        assert kurtosis([5.0, 5.0, 5.0, 5.0]) is None

    def test_too_few_values_is_degenerate(self):
        assert kurtosis([1.0, 2.0, 3.0]) is None

    def test_symmetric_two_point_is_one(self):
        values = np.tile([-1.0, 1.0], 50)
        assert abs(kurtosis(values) - 1.0) < 1e-9

    def test_gaussian_monte_carlo(self):
        rng = np.random.default_rng(43)
        samples = rng.standard_normal(10**6)
        assert abs(kurtosis(samples) - 3.0) < 0.05

    def test_translation_and_scale_invariance(self):
        rng = np.random.default_rng(44)
        x = rng.standard_normal(500)
        base = kurtosis(x)
        for a, b in [(2.5, 0.0), (-0.3, 4.0), (10.0, -7.0)]:
            assert abs(kurtosis(a * x + b) - base) < 1e-9


class TestNorms:
    def test_zero_matrix(self):
        np.testing.assert_array_equal(row_norms(np.zeros((3, 4))), np.zeros(3))
        np.testing.assert_array_equal(col_norms(np.zeros((3, 4))), np.zeros(4))

    def test_three_four_five(self):
        m = np.array([[3.0, 4.0], [0.0, 1.0]])
        np.testing.assert_allclose(row_norms(m), [5.0, 1.0])

    def test_against_scalar_loop(self):
        rng = np.random.default_rng(45)
        m = rng.standard_normal((5, 7))
        by_rows = [math.sqrt(sum(m[i, j] ** 2 for j in range(7))) for i in range(5)]
        by_cols = [math.sqrt(sum(m[i, j] ** 2 for i in range(5))) for j in range(7)]
        np.testing.assert_allclose(row_norms(m), by_rows, atol=1e-12)
        np.testing.assert_allclose(col_norms(m), by_cols, atol=1e-12)
