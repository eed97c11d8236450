"""Tests for 1D and 2D multiscale finite elements."""
import numpy as np
import pytest

from msinfer.exceptions import RankSurprise, SingularSystem
from msinfer.msfem import (BILINEAR_STIFFNESS, MsFEM1D, MsFEM2D, coarse_gradient,
                           coarse_likelihood, elemental_integrals_1d, elemental_matrices_2d,
                           fine_fem_solve_1d, fine_fem_solve_2d, fine_heads_at_coarse_nodes_2d,
                           matrix_to_vec10, msfem_basis_2d, reduce_elemental_2d,
                           solve_coarse_1d, upscale_1d, upscale_1d_jacobian, upscale_2d,
                           vec10_to_matrix)
from msinfer.prior import GaussianFieldPrior, GridGeometry


def local_energy_oracle(kappa, width):
    """Energy of the discrete basis function rising 0 -> 1 across one element."""
    n = kappa.size
    k = kappa / (width / n)
    A = np.zeros((n + 1, n + 1))
    for c in range(n):
        A[c:c + 2, c:c + 2] += k[c] * np.array([[1, -1], [-1, 1]])
    u = np.zeros(n + 1)
    u[-1] = 1.0
    inner = slice(1, n)
    u[inner] = np.linalg.solve(A[inner, inner], -A[inner, -1])
    return u @ A @ u


@pytest.fixture(scope="module")
def geom2d():
    return GridGeometry.square(4, 7)


@pytest.fixture(scope="module")
def prior2d(geom2d):
    return GaussianFieldPrior.exponential(geom2d, 1.0, 0.1)


@pytest.fixture(scope="module")
def reduced2d(geom2d, prior2d):
    theta = prior2d.sample(100, 0)
    return reduce_elemental_2d(matrix_to_vec10(elemental_matrices_2d(theta, geom2d)))


class TestUpscale1D:
    def test_constant_conductivity(self):
        g = GridGeometry.line(10, 10)
        theta = np.full(100, np.log(3.0))
        np.testing.assert_allclose(np.exp(upscale_1d(theta, g)), 3.0 / 0.1)

    def test_two_cell_harmonic_mean(self):
        g = GridGeometry.line(10, 2)
        theta = np.log(np.tile([1.0, 3.0], 10))
        np.testing.assert_allclose(elemental_integrals_1d(theta, g), 15.0)

    def test_matches_local_solve(self):
        g = GridGeometry.line(10, 10)
        theta = np.random.default_rng(0).standard_normal(100)
        e = np.exp(upscale_1d(theta, g))
        kappa = np.exp(theta).reshape(10, 10)
        oracle = [local_energy_oracle(kappa[c], 0.1) for c in range(10)]
        np.testing.assert_allclose(e, oracle, rtol=1e-12)

    def test_batch(self):
        g = GridGeometry.line(5, 4)
        theta = np.random.default_rng(1).standard_normal((3, 20))
        np.testing.assert_allclose(upscale_1d(theta, g)[2], upscale_1d(theta[2], g))

    def test_jacobian(self):
        g = GridGeometry.line(5, 4)
        theta = np.random.default_rng(2).standard_normal(20)
        h = 1e-6
        fd = np.column_stack([(upscale_1d(theta + h * e, g) - upscale_1d(theta - h * e, g)) / (2 * h)
                              for e in np.eye(20)])
        np.testing.assert_allclose(upscale_1d_jacobian(theta, g), fd, atol=1e-8)


class TestSolve1D:
    def test_uniform_linear_profile(self):
        np.testing.assert_allclose(solve_coarse_1d(np.zeros(10)), np.linspace(0, 1, 11),
                                   atol=1e-14)

    def test_flux_balance(self):
        h = solve_coarse_1d(np.log([15.0, 5.0]))
        assert h[1] == pytest.approx(0.25, abs=1e-14)

    def test_nodal_exactness(self):
        g = GridGeometry.line(10, 10)
        prior = GaussianFieldPrior.exponential(g, 1.0, 0.1)
        for theta in prior.sample(5, 3):
            fine = fine_fem_solve_1d(theta, g)
            coarse = solve_coarse_1d(upscale_1d(theta, g))
            np.testing.assert_allclose(coarse, fine[::10], atol=1e-10)

    def test_underflow(self):
        with pytest.raises(SingularSystem):
            solve_coarse_1d(np.full(4, -1e4))

    def test_fine_constant_kappa(self):
        g = GridGeometry.line(4, 5)
        h = fine_fem_solve_1d(np.full(20, 0.7), g, bc=(2.0, -1.0))
        np.testing.assert_allclose(h, np.linspace(2, -1, 21), atol=1e-12)

    def test_manufactured_convergence(self):
        def l2_error(n):
            g = GridGeometry.line(n, 1)
            h = fine_fem_solve_1d(np.zeros(n), g, bc=(0.0, 0.0),
                                  f=lambda x: np.pi ** 2 * np.sin(np.pi * x))
            xg, wg = np.polynomial.legendre.leggauss(6)
            nodes = np.linspace(0, 1, n + 1)
            err = 0.0
            for c in range(n):
                a, b = nodes[c], nodes[c + 1]
                x = a + 0.5 * (b - a) * (xg + 1)
                uh = h[c] + (h[c + 1] - h[c]) * (x - a) / (b - a)
                err += 0.5 * (b - a) * np.sum(wg * (uh - np.sin(np.pi * x)) ** 2)
            return np.sqrt(err)

        ratio = l2_error(20) / l2_error(40)
        assert ratio == pytest.approx(4.0, abs=0.3)


class TestLikelihood1D:
    @pytest.fixture
    def model(self):
        return MsFEM1D(GridGeometry.line(10, 10))

    def test_zero_gradient_at_exact_data(self, model):
        gamma = np.random.default_rng(4).normal(2.3, 0.5, 10)
        d = model.observe(gamma)
        np.testing.assert_allclose(coarse_gradient(model, gamma, d, 1e-4), 0, atol=1e-10)

    def test_gradient_matches_fd(self, model):
        rng = np.random.default_rng(5)
        gamma = rng.normal(2.3, 0.5, 10)
        d = model.observe(gamma + 0.3 * rng.standard_normal(10))
        g = coarse_gradient(model, gamma, d, 1e-4)
        h = 1e-6
        fd = np.array([(coarse_likelihood(model, gamma + h * e, d, 1e-4)
                        - coarse_likelihood(model, gamma - h * e, d, 1e-4)) / (2 * h)
                       for e in np.eye(10)])
        np.testing.assert_allclose(g, fd, rtol=1e-5)

    def test_observation_jacobian(self, model):
        gamma = np.random.default_rng(6).normal(2.3, 0.5, 10)
        h = 1e-6
        fd = np.column_stack([(model.observe(gamma + h * e) - model.observe(gamma - h * e)) / (2 * h)
                              for e in np.eye(10)])
        np.testing.assert_allclose(model.observation_jacobian(gamma), fd, atol=1e-8)

    def test_likelihood_decreases_away_from_truth(self, model):
        rng = np.random.default_rng(7)
        gamma = rng.normal(2.3, 0.5, 10)
        d = model.observe(gamma)
        top = coarse_likelihood(model, gamma, d, 1e-4)
        assert top == 0.0
        for _ in range(5):
            assert coarse_likelihood(model, gamma + 0.1 * rng.standard_normal(10), d, 1e-4) < top


class TestLocalBasis2D:
    def test_constant_kappa_gives_bilinear(self):
        np.testing.assert_allclose(msfem_basis_2d(np.zeros(49), 7), BILINEAR_STIFFNESS, atol=1e-10)
        np.testing.assert_allclose(msfem_basis_2d(np.full(49, np.log(2.5)), 7),
                                   2.5 * BILINEAR_STIFFNESS, atol=1e-10)

    def test_row_sums_and_symmetry(self):
        E = msfem_basis_2d(np.random.default_rng(8).standard_normal((20, 49)), 7)
        np.testing.assert_allclose(E.sum(axis=2), 0, atol=1e-10)
        np.testing.assert_allclose(E, np.transpose(E, (0, 2, 1)), atol=1e-12)
        assert np.all(np.linalg.eigvalsh(E)[:, 0] > -1e-10)

    def test_single_cell_element(self):
        np.testing.assert_allclose(msfem_basis_2d(np.array([np.log(3.0)]), 1),
                                   3 * BILINEAR_STIFFNESS, atol=1e-14)

    def test_vec10_round_trip(self):
        E = msfem_basis_2d(np.random.default_rng(9).standard_normal(49), 7)
        np.testing.assert_allclose(vec10_to_matrix(matrix_to_vec10(E)), E)


class TestReduction2D:
    def test_six_degrees_of_freedom(self, reduced2d):
        assert reduced2d.basis.shape == (10, 6)
        assert reduced2d.rank_ratio <= 1e-6

    def test_held_out_reconstruction(self, geom2d, prior2d, reduced2d):
        v = matrix_to_vec10(elemental_matrices_2d(prior2d.sample(10, 99), geom2d)).reshape(-1, 10)
        rec = reduced2d.reconstruct(reduced2d.project(v))
        rel = np.linalg.norm(rec - v, axis=1) / np.linalg.norm(v, axis=1)
        assert rel.max() <= 1e-6

    def test_mean_round_trip(self, reduced2d):
        np.testing.assert_allclose(reduced2d.reconstruct(reduced2d.project(reduced2d.mean)),
                                   reduced2d.mean, atol=1e-10)

    def test_rank_surprise_warning(self):
        v = np.random.default_rng(10).standard_normal((1200, 10))
        with pytest.warns(RankSurprise):
            reduce_elemental_2d(v)

    def test_too_few_vectors(self):
        with pytest.raises(ValueError):
            reduce_elemental_2d(np.zeros((10, 10)))


class TestCoarse2D:
    def test_constant_kappa_matches_bilinear_fem(self, geom2d, reduced2d):
        model = MsFEM2D(geom2d, reduced2d)
        theta = np.full(geom2d.n_fine, np.log(1.7))
        coarse = model.heads(upscale_2d(theta, geom2d, reduced2d))
        # a coarse-only grid with constant conductivity is plain bilinear FEM
        g1 = GridGeometry.square(4, 1)
        ref = fine_fem_solve_2d(np.full(g1.n_fine, np.log(1.7)), g1).ravel()
        np.testing.assert_allclose(coarse, ref, atol=1e-10)

    def test_stiffness_symmetric(self, geom2d, prior2d, reduced2d):
        model = MsFEM2D(geom2d, reduced2d)
        A = model.assemble(model.element_matrices(upscale_2d(prior2d.sample(1, 3)[0], geom2d,
                                                             reduced2d)))
        np.testing.assert_allclose(A, A.T, atol=1e-12)

    def test_close_to_fine_reference(self, geom2d, prior2d, reduced2d):
        model = MsFEM2D(geom2d, reduced2d)
        errs = []
        for theta in prior2d.sample(20, 4):
            fine = fine_heads_at_coarse_nodes_2d(theta, geom2d)
            coarse = model.heads(upscale_2d(theta, geom2d, reduced2d))
            errs.append(np.linalg.norm(coarse - fine) / np.linalg.norm(fine))
        # linear edge conditions leave a resonance error of about two percent on average
        assert np.mean(errs) <= 0.025
        assert np.max(errs) <= 0.1

    def test_gradient_and_jacobian_match_fd(self, geom2d, prior2d, reduced2d):
        model = MsFEM2D(geom2d, reduced2d)
        rng = np.random.default_rng(11)
        gamma = upscale_2d(prior2d.sample(1, 5)[0], geom2d, reduced2d)
        d = model.observe(gamma) + 1e-3 * rng.standard_normal(model.obs_nodes.size)
        _, g = model.loglik_and_grad(gamma, d, 1e-6)
        h = 1e-6
        idx = rng.choice(gamma.size, 8, replace=False)
        for k in idx:
            e = np.zeros(gamma.size)
            e[k] = h
            fd = (model.loglik(gamma + e, d, 1e-6) - model.loglik(gamma - e, d, 1e-6)) / (2 * h)
            assert g[k] == pytest.approx(fd, rel=1e-5, abs=1e-3)
            jfd = (model.observe(gamma + e) - model.observe(gamma - e)) / (2 * h)
            np.testing.assert_allclose(model.observation_jacobian(gamma)[:, k], jfd, atol=1e-7)

    def test_fine_maximum_principle(self, geom2d):
        u = fine_fem_solve_2d(np.zeros(geom2d.n_fine), geom2d)
        assert u.min() >= -1e-12 and u.max() <= 1 + 1e-12
        u = fine_fem_solve_2d(np.full(geom2d.n_fine, 0.4), geom2d)
        assert u.min() >= -1e-12 and u.max() <= 1 + 1e-12
