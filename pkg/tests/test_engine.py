"""Tests for the multiscale pipeline, prolongation and budget optimization."""
import warnings

import numpy as np
import pytest

from msinfer.engine import (BudgetModel, MultiscaleProblem, PipelineOptions,
                            build_maps, coarse_posterior_logdensity,
                            estimate_variance_constants, generate_joint_prior,
                            optimal_allocation, prolong, run_pipeline,
                            step_costs_from_timings)
from msinfer.exceptions import (ClippedEigenvalueWarning, ConfigError, DegenerateBudget,
                                SingularFit, SingularSystem)
from msinfer.msfem import upscale_1d
from msinfer.problems import elliptic1d_problem, toy_problem
from msinfer.prior import GaussianFieldPrior
from msinfer.transport import LinearConditionalMap

LIN_A = np.array([1.0, 0.5, -0.8])
LIN_NOISE = 0.05
LIN_COV = np.array([[1.0, 0.3, 0.1], [0.3, 0.8, -0.2], [0.1, -0.2, 1.2]])


def linear_problem():
    """gamma = a . theta with a Gaussian prior and Gaussian noise on d = gamma."""
    prior = GaussianFieldPrior(np.array([0.2, -0.1, 0.0]), np.linalg.cholesky(LIN_COV))

    def upscale(theta, rng=None):
        return (np.atleast_2d(theta) @ LIN_A)[:, None]

    def loglik_and_grad(g, d):
        r = g[0] - d
        return -0.5 * r * r / LIN_NOISE, np.array([-r / LIN_NOISE])

    return MultiscaleProblem(prior, upscale, 1, lambda g, d: loglik_and_grad(g, d)[0],
                             loglik_and_grad, observation_jacobian=lambda g: np.eye(1),
                             noise_var=LIN_NOISE, name="linear")


def linear_posterior(d):
    mu0 = np.array([0.2, -0.1, 0.0])
    P = np.linalg.inv(LIN_COV) + np.outer(LIN_A, LIN_A) / LIN_NOISE
    C = np.linalg.inv(P)
    return C @ (np.linalg.solve(LIN_COV, mu0) + LIN_A * d / LIN_NOISE), C


class TestBudget:
    def test_reference_allocation(self):
        alloc = optimal_allocation(BudgetModel(1.0, 0.7, 10.0, 0.2))
        assert alloc.M_raw == pytest.approx(5.9161, abs=1e-3)
        assert alloc.M == 6

    def test_total_time_only_scales_n(self):
        a = optimal_allocation(BudgetModel(1.0, 0.7, 10.0, 0.2, t_tot=1.0))
        b = optimal_allocation(BudgetModel(1.0, 0.7, 10.0, 0.2, t_tot=250.0))
        assert b.M_raw == pytest.approx(a.M_raw, rel=1e-12)
        assert b.N == pytest.approx(250 * a.N, rel=1e-12)

    def test_budget_constraint_holds(self):
        b = BudgetModel(3.0, 2.0, 0.5, 0.01, t_tot=100.0)
        a = optimal_allocation(b)
        assert a.N * (b.t_c + a.M_raw * b.t_f) == pytest.approx(b.t_tot, rel=1e-8)

    def test_optimum_beats_neighbours(self):
        b = BudgetModel(1.0, 0.7, 10.0, 0.2, t_tot=1000.0)
        a = optimal_allocation(b)
        best = b.variance(a.N, a.M_raw)
        for M in (a.M_raw * 0.8, a.M_raw * 1.2, 1.0, 20.0):
            N = b.t_tot / (b.t_c + M * b.t_f)
            assert b.variance(N, M) > best

    def test_degenerate(self):
        with pytest.raises(DegenerateBudget):
            optimal_allocation(BudgetModel(1.0, 1.0, 1.0, 1.0))

    def test_nonpositive_constants(self):
        with pytest.raises(ValueError):
            BudgetModel(0.0, 1.0, 1.0, 1.0)

    def test_step_costs_from_two_rows(self):
        t_c, t_f = step_costs_from_timings([100, 100], [1, 5], [100 * (2 + 0.5), 100 * (2 + 2.5)])
        assert t_c == pytest.approx(2.0)
        assert t_f == pytest.approx(0.5)

    def test_step_costs_need_two_m(self):
        with pytest.raises(SingularFit):
            step_costs_from_timings([10, 20], [1, 1], [1.0, 2.0])


class TestVarianceFit:
    def test_exact_recovery(self):
        N = np.array([1e3, 1e3, 1e4, 1e4])
        M = np.array([1, 5, 1, 5])
        fit = estimate_variance_constants(N, M, 2.0 / N + 1.0 / (N * M))
        assert fit.C1 == pytest.approx(2.0, abs=1e-10)
        assert fit.C2 == pytest.approx(1.0, abs=1e-10)
        assert fit.r2 == pytest.approx(1.0)

    def test_relative_weighting_exact(self):
        N = np.array([1e3, 1e3, 1e4, 1e4])
        M = np.array([1, 5, 1, 5])
        fit = estimate_variance_constants(N, M, 2.0 / N + 1.0 / (N * M), relative=True)
        assert fit.C1 == pytest.approx(2.0, rel=1e-10)

    def test_collinear_designs(self):
        with pytest.raises(SingularFit):
            estimate_variance_constants([1e3, 1e4], [2, 2], [1e-3, 1e-4])

    def test_negative_constants_clipped(self):
        N = np.array([10.0, 10.0, 100.0, 100.0])
        M = np.array([1, 5, 1, 5])
        with pytest.warns(RuntimeWarning):
            fit = estimate_variance_constants(N, M, 1.0 / N - 0.5 / (N * M))
        assert fit.C2 == 0.0


class TestJointPrior:
    def test_shapes_and_deterministic_upscaling(self):
        prob = elliptic1d_problem()
        J = generate_joint_prior(prob, 7, seed=0)
        assert J.shape == (7, 110)
        np.testing.assert_allclose(J[:, :10], upscale_1d(J[:, 10:], prob.geometry))

    def test_single_draw(self):
        assert generate_joint_prior(toy_problem(), 1, seed=0).shape == (1, 3)

    def test_seeded(self):
        a = generate_joint_prior(toy_problem(), 50, seed=3)
        np.testing.assert_array_equal(a, generate_joint_prior(toy_problem(), 50, seed=3))


@pytest.fixture(scope="module")
def toy_maps():
    prob = toy_problem()
    opts = PipelineOptions(K=3000, coarse_degree=2, fine_map="joint", fine_degree=2)
    transport, fine, _ = build_maps(prob, generate_joint_prior(prob, 3000, seed=0), opts)
    return prob, transport, fine


class TestCoarsePosterior:
    def test_prior_only_limit(self, toy_maps):
        prob, transport, _ = toy_maps
        r = np.array([0.7])
        lp, g = coarse_posterior_logdensity(prob, transport.inverse, r, None, with_grad=True)
        assert lp == pytest.approx(-0.5 * 0.49 - 0.5 * np.log(2 * np.pi))
        np.testing.assert_allclose(g, -r)

    def test_gradient_matches_fd(self, toy_maps):
        prob, transport, _ = toy_maps
        for r0 in (-1.0, 0.2, 1.3):
            r = np.array([r0])
            _, g = coarse_posterior_logdensity(prob, transport.inverse, r, 0.3, with_grad=True)
            h = 1e-6
            fd = (coarse_posterior_logdensity(prob, transport.inverse, r + h, 0.3)
                  - coarse_posterior_logdensity(prob, transport.inverse, r - h, 0.3)) / (2 * h)
            assert g[0] == pytest.approx(fd, rel=1e-5, abs=1e-6)

    def test_singular_system_has_zero_likelihood(self, toy_maps):
        _, transport, _ = toy_maps

        def broken(g, d):
            raise SingularSystem("not positive definite")

        prob = MultiscaleProblem(toy_problem().prior, None, 1, broken, broken)
        r = np.array([0.1])
        assert coarse_posterior_logdensity(prob, transport.inverse, r, 0.3) == -np.inf
        lp, g = coarse_posterior_logdensity(prob, transport.inverse, r, 0.3, with_grad=True)
        assert lp == -np.inf and np.all(np.isnan(g))

    def test_joint_map_prolongation(self, toy_maps):
        _, _, fine = toy_maps
        theta, prov = prolong(np.zeros((4, 1)), fine, 2, seed=0, coarse_dim=1)
        assert theta.shape == (8, 2)
        np.testing.assert_array_equal(prov[:, 0], [0, 0, 1, 1, 2, 2, 3, 3])


class TestProlong:
    def test_zero_gain_returns_mean(self):
        m = LinearConditionalMap(np.array([1.0, 2.0]), np.zeros((2, 1)), np.zeros((2, 2)))
        theta, _ = prolong(np.random.default_rng(0).standard_normal((5, 1)), m, 2, seed=1)
        np.testing.assert_array_equal(theta, np.tile([1.0, 2.0], (10, 1)))

    def test_sizes_and_provenance(self):
        m = LinearConditionalMap(np.zeros(3), np.ones((3, 2)), np.eye(3))
        theta, prov = prolong(np.zeros((10, 2)), m, 3, seed=0, chunk=7)
        assert theta.shape == (30, 3)
        np.testing.assert_array_equal(prov[:4], [[0, 0], [0, 1], [0, 2], [1, 0]])

    def test_gaussian_consistency(self):
        # prior r_c pushed through the cross-covariance map returns the prior
        rng = np.random.default_rng(2)
        L = np.linalg.cholesky(LIN_COV)
        G = 0.4 * np.ones((3, 1))
        m = LinearConditionalMap(np.zeros(3), G, np.linalg.cholesky(LIN_COV - G @ G.T))
        theta, _ = prolong(rng.standard_normal((100000, 1)), m, 1, seed=3)
        np.testing.assert_allclose(np.cov(theta.T), L @ L.T, atol=0.02)

    def test_dimension_mismatch(self):
        m = LinearConditionalMap(np.zeros(3), np.ones((3, 2)), np.eye(3))
        with pytest.raises(ValueError):
            prolong(np.zeros((4, 3)), m, 1)


class TestPipeline:
    def test_invalid_n_rejected_before_work(self):
        prob = toy_problem()
        prob.prior.sample = None  # any compute would fail differently
        with pytest.raises(ConfigError):
            run_pipeline(prob, 0.3, PipelineOptions(N=0))

    @pytest.mark.parametrize("field,value", [("fine_map", "x"), ("sampler", "hmc"), ("K", 1)])
    def test_invalid_options(self, field, value):
        opts = PipelineOptions(**{field: value})
        with pytest.raises(ConfigError):
            opts.validate()

    def test_conjugate_gaussian(self):
        prob = linear_problem()
        d = 0.9
        opts = PipelineOptions(K=20000, coarse_degree=1, fine_map="cross_covariance",
                               N=40000, M=1, seed=4)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ClippedEigenvalueWarning)
            ens = run_pipeline(prob, d, opts)
        mean, cov = linear_posterior(d)
        sd = np.sqrt(np.diag(cov))
        s = ens.fine_samples
        np.testing.assert_array_less(np.abs(s.mean(axis=0) - mean), 0.03 * sd)
        np.testing.assert_allclose(s.var(axis=0), np.diag(cov), rtol=0.03)

    def test_toy_run_and_map_reuse(self):
        prob = toy_problem()
        opts = PipelineOptions(K=2000, coarse_degree=2, fine_map="joint", fine_degree=2,
                               N=1000, M=2, seed=5)
        ens = run_pipeline(prob, 0.3, opts)
        assert ens.fine_samples.shape == (2000, 2)
        assert ens.coarse_samples.shape == (1000, 1)
        assert 0 < ens.metadata["acceptance_rate"] <= 1
        again = run_pipeline(prob, 0.3, opts, maps=(ens.maps["coarse"], ens.maps["fine"]))
        assert again.metadata["t_maps"] == 0.0
        np.testing.assert_array_equal(again.fine_samples, ens.fine_samples)
