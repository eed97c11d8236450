"""Tests for grid geometries and Gaussian random-field priors."""
import numpy as np
import pytest
from scipy import stats

from msinfer.prior import (GaussianFieldPrior, GridGeometry, exponential_kernel,
                           exponential_kernel_matrix, sample_field)


class TestKernel:
    def test_zero_distance(self):
        assert exponential_kernel([0.3, 0.2], [0.3, 0.2], 2.5, 0.1) == 2.5

    def test_one_correlation_length(self):
        assert exponential_kernel([0.0], [0.1], 1.7, 0.1) == pytest.approx(1.7 / np.e)

    def test_half_correlation_length(self):
        assert exponential_kernel(0.5, 0.55, 1.0, 0.1) == pytest.approx(0.60653, abs=1e-5)

    def test_matrix_matches_pointwise(self):
        P = np.random.default_rng(0).random((6, 2))
        K = exponential_kernel_matrix(P, 1.3, 0.2)
        for i in range(6):
            for j in range(6):
                assert K[i, j] == pytest.approx(exponential_kernel(P[i], P[j], 1.3, 0.2))

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            exponential_kernel(0.0, 1.0, 1.0, 0.0)


class TestGeometry:
    def test_line(self):
        g = GridGeometry.line(10, 10)
        assert g.n_fine == 100 and g.n_elements == 10
        np.testing.assert_allclose(g.cell_centers()[:3], [0.005, 0.015, 0.025])

    def test_square_element_major_ordering(self):
        g = GridGeometry.square(2, 3)
        assert g.n_fine == 36
        idx = g.cell_grid_index()
        # first nine parameters fill the lower-left coarse element
        assert set(map(tuple, idx[:9])) == {(i, j) for i in range(3) for j in range(3)}
        np.testing.assert_array_equal(g.element_of_cell()[9:18], 1)

    def test_grid_round_trip(self):
        g = GridGeometry.square(4, 7)
        theta = np.random.default_rng(1).standard_normal((3, g.n_fine))
        grid = g.to_grid(theta)
        assert grid.shape == (3, 28, 28)
        np.testing.assert_array_equal(g.from_grid(grid), theta)

    def test_invalid(self):
        with pytest.raises(ValueError):
            GridGeometry(3, (2, 2, 2), 2)


class TestGaussianFieldPrior:
    def test_small_variance_limit(self):
        g = GridGeometry.line(4, 5)
        p = GaussianFieldPrior.exponential(g, sigma2=1e-24, corr_length=0.1, mean=0.7)
        np.testing.assert_allclose(p.sample(5, 0), 0.7, atol=1e-9)

    def test_marginal_variance_and_correlation(self):
        g = GridGeometry.line(10, 10)
        p = GaussianFieldPrior.exponential(g, sigma2=1.0, corr_length=0.1)
        S = sample_field(p, 100000, seed=2)
        np.testing.assert_allclose(S.var(axis=0).mean(), 1.0, rtol=0.03)
        # cells 10 apart are 0.1 apart
        a, b = S[:, 20], S[:, 30]
        assert np.corrcoef(a, b)[0, 1] == pytest.approx(np.exp(-1), abs=0.03)

    def test_logpdf_at_mean(self):
        g = GridGeometry.line(2, 5)
        p = GaussianFieldPrior.exponential(g)
        expected = -0.5 * p.dim * np.log(2 * np.pi) - np.sum(np.log(np.diag(p.covariance_factor)))
        assert p.logpdf(p.mean) == pytest.approx(expected, rel=1e-14)

    def test_single_cell_shift(self):
        g = GridGeometry.line(1, 1)
        p = GaussianFieldPrior.exponential(g, sigma2=1.0)
        assert p.logpdf(p.mean + 1) - p.logpdf(p.mean) == pytest.approx(-0.5)

    def test_logpdf_matches_dense_oracle(self):
        g = GridGeometry.line(2, 5)
        p = GaussianFieldPrior.exponential(g, sigma2=0.8, corr_length=0.15, mean=0.3)
        C = exponential_kernel_matrix(g.cell_centers(), 0.8, 0.15)
        X = p.sample(4, 3)
        dense = stats.multivariate_normal(p.mean, C).logpdf(X)
        np.testing.assert_allclose(p.logpdf(X), dense, atol=1e-8)
        dev = X - p.mean
        np.testing.assert_allclose(p.grad_logpdf(X), -np.linalg.solve(C, dev.T).T, atol=1e-8)

    def test_seeded_sampling_is_deterministic(self):
        p = GaussianFieldPrior.exponential(GridGeometry.line(3, 3))
        np.testing.assert_array_equal(p.sample(4, 9), p.sample(4, 9))

    def test_whiten_inverts_sampling(self):
        p = GaussianFieldPrior.exponential(GridGeometry.square(2, 3))
        rng = np.random.default_rng(5)
        z = rng.standard_normal((3, p.dim))
        theta = p.mean + z @ p.covariance_factor.T
        np.testing.assert_allclose(p.whiten(theta), z, atol=1e-10)

    def test_factor_shape_checked(self):
        with pytest.raises(ValueError):
            GaussianFieldPrior(np.zeros(3), np.eye(2))
