import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import trapezoid

from jensen_effect.basis import (
    basis_from_spec,
    basis_spec,
    eval_basis,
    inner_product_matrix,
    linear_coefficients,
    make_bspline_basis,
    make_fourier_basis,
    penalty_matrix,
    penalty_null_space,
    quadrature_rule,
    trapezoid_weights,
)
from jensen_effect.errors import InvalidArgumentError, OutOfDomainError


class TestBsplineBasis:
    def test_partition_of_unity(self):
        b = make_bspline_basis((-1.0, 2.0), 15, 4)
        x = np.linspace(-1.0, 2.0, 301)
        assert_allclose(eval_basis(b, x).sum(axis=1), 1.0, atol=1e-12)

    def test_partition_of_unity_order_six(self):
        b = make_bspline_basis((0.0, 1.0), 25, 6)
        x = np.linspace(0.0, 1.0, 257)
        assert_allclose(eval_basis(b, x).sum(axis=1), 1.0, atol=1e-12)
        assert_allclose(eval_basis(b, x, 2).sum(axis=1), 0.0, atol=1e-6)

    def test_interior_knots_equally_spaced(self):
        b = make_bspline_basis((0.0, 1.0), 8, 4)
        assert len(b.knots) == 4
        assert_allclose(np.diff(b.knots), 0.2)

    def test_derivative_matches_finite_difference(self):
        b = make_bspline_basis((0.0, 1.0), 10, 5)
        x = np.array([0.13, 0.41, 0.77])
        h = 1e-6
        fd = (eval_basis(b, x + h) - eval_basis(b, x - h)) / (2 * h)
        assert_allclose(eval_basis(b, x, 1), fd, atol=1e-6)

    def test_out_of_domain(self):
        b = make_bspline_basis((0.0, 1.0), 6, 4)
        with pytest.raises(OutOfDomainError):
            eval_basis(b, [0.5, 1.01])

    def test_tiny_overshoot_is_snapped(self):
        b = make_bspline_basis((0.0, 1.0), 6, 4)
        assert_allclose(eval_basis(b, [1.0 + 1e-14]), eval_basis(b, [1.0]))

    def test_derivative_of_order_rejected(self):
        b = make_bspline_basis((0.0, 1.0), 6, 4)
        with pytest.raises(InvalidArgumentError):
            eval_basis(b, [0.5], deriv=4)

    @pytest.mark.parametrize("domain,n_basis,order", [((1.0, 1.0), 6, 4), ((0.0, 1.0), 3, 4), ((0.0, 1.0), 5, 0)])
    def test_invalid_construction(self, domain, n_basis, order):
        with pytest.raises(InvalidArgumentError):
            make_bspline_basis(domain, n_basis, order)

    def test_linear_coefficients_reproduce_line(self):
        b = make_bspline_basis((-2.0, 3.0), 12, 6)
        x = np.linspace(-2.0, 3.0, 101)
        coef = linear_coefficients(b, 0.7, -1.3)
        assert_allclose(eval_basis(b, x) @ coef, 0.7 - 1.3 * x, atol=1e-12)


class TestFourierBasis:
    def test_orthonormal(self):
        f = make_fourier_basis((0.0, 2.0), 9)
        assert_allclose(inner_product_matrix(f, f), np.eye(9), atol=1e-10)

    def test_ordering_constant_then_pairs(self):
        f = make_fourier_basis((0.0, 1.0), 5)
        x = np.array([0.0, 0.25])
        E = eval_basis(f, x)
        assert_allclose(E[:, 0], 1.0)
        assert_allclose(E[:, 1], math.sqrt(2) * np.sin(2 * np.pi * x), atol=1e-14)
        assert_allclose(E[:, 2], math.sqrt(2) * np.cos(2 * np.pi * x), atol=1e-14)
        assert_allclose(E[:, 3], math.sqrt(2) * np.sin(4 * np.pi * x), atol=1e-14)

    def test_penalty_is_diagonal_in_frequency(self):
        f = make_fourier_basis((0.0, 1.0), 7)
        P = penalty_matrix(f, 2)
        freq = np.array([0, 1, 1, 2, 2, 3, 3])
        assert_allclose(np.diag(P), (2 * np.pi * freq) ** 4, rtol=1e-8)
        assert_allclose(P - np.diag(np.diag(P)), 0.0, atol=1e-6 * P.max())

    def test_null_space_is_constant(self):
        f = make_fourier_basis((0.0, 3.0), 5)
        N = penalty_null_space(f, 2)
        assert N.shape == (5, 1)
        assert_allclose(eval_basis(f, [0.3, 2.1]) @ N[:, 0], 1.0)


class TestPenalty:
    def test_matches_dense_quadrature(self):
        b = make_bspline_basis((0.0, 1.0), 12, 4)
        x = np.linspace(0.0, 1.0, 200001)
        D = eval_basis(b, x, 2)
        oracle = np.array([[trapezoid(D[:, i] * D[:, j], x) for j in range(12)] for i in range(12)])
        P = penalty_matrix(b, 2)
        assert_allclose(P, oracle, rtol=1e-6, atol=1e-6 * np.abs(oracle).max())

    def test_symmetric_psd(self):
        P = penalty_matrix(make_bspline_basis((0.0, 5.0), 20, 6), 2)
        assert_allclose(P, P.T)
        assert np.linalg.eigvalsh(P).min() > -1e-8 * np.abs(P).max()

    def test_null_space_is_annihilated(self):
        b = make_bspline_basis((0.0, 60.0), 12, 6)
        P = penalty_matrix(b, 2)
        N = penalty_null_space(b, 2)
        assert N.shape == (12, 2)
        assert_allclose(P @ N, 0.0, atol=1e-8 * np.abs(P).max())

    def test_null_space_columns_are_polynomials(self):
        b = make_bspline_basis((0.0, 60.0), 12, 6)
        N = penalty_null_space(b, 2)
        x = np.linspace(0.0, 60.0, 7)
        values = eval_basis(b, x) @ N
        assert_allclose(values[:, 0], 1.0, atol=1e-12)
        assert_allclose(np.diff(values[:, 1], 2), 0.0, atol=1e-12)

    def test_penalty_derivative_bound(self):
        with pytest.raises(InvalidArgumentError):
            penalty_matrix(make_bspline_basis((0.0, 1.0), 6, 2), 2)

    @pytest.mark.parametrize("order,deriv", [(4, 1), (4, 2), (6, 2)])
    def test_null_space_dimension_is_deriv(self, order, deriv):
        P = penalty_matrix(make_bspline_basis((0.0, 1.0), 10, order), deriv)
        eigenvalues = np.linalg.eigvalsh(P)
        assert np.sum(eigenvalues < 1e-8 * np.trace(P)) == deriv

    def test_doubling_nodes_leaves_penalty_unchanged(self):
        b = make_bspline_basis((0.0, 1.0), 12, 4)
        P = penalty_matrix(b, 2)
        finer = penalty_matrix(b, 2, n_nodes=2 * b.panel_nodes)
        assert np.abs(finer - P).max() < 1e-12 * np.abs(P).max()


class TestQuadrature:
    def test_exact_for_high_degree_per_panel(self):
        b = make_bspline_basis((0.0, 1.0), 8, 3)
        nodes, weights = quadrature_rule(b)
        assert_allclose(weights @ nodes ** 5, 1.0 / 6.0, rtol=1e-13)

    def test_trapezoid_weights(self):
        grid = np.array([0.0, 0.5, 2.0, 3.0])
        w = trapezoid_weights(grid)
        assert_allclose(w.sum(), 3.0)
        assert_allclose(w @ grid, 4.5)

    def test_trapezoid_weights_need_increasing_grid(self):
        with pytest.raises(InvalidArgumentError):
            trapezoid_weights([0.0, 1.0, 1.0])

    def test_cross_gram_domain_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            inner_product_matrix(make_fourier_basis((0.0, 1.0), 3), make_bspline_basis((0.0, 2.0), 6, 4))

    def test_gram_matches_midpoint_sum(self):
        b = make_bspline_basis((0.0, 1.0), 8, 4)
        n = 100_000
        E = eval_basis(b, (np.arange(n) + 0.5) / n)
        oracle = E.T @ E / n
        G = inner_product_matrix(b, b)
        assert np.abs(G - oracle).max() < 1e-6 * np.abs(oracle).max()


class TestSpec:
    def test_spec_preserves_knots(self):
        b = make_bspline_basis((0.0, 60.0), 12, 6)
        restored = basis_from_spec(basis_spec(b))
        assert restored == b
        x = np.linspace(0.0, 60.0, 13)
        assert_allclose(eval_basis(restored, x), eval_basis(b, x))
