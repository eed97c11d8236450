"""Ready-made multiscale problems: the two-parameter toy model and 1D/2D
elliptic problems with MsFEM upscaling."""
import numpy as np

from . import msfem
from .engine import MultiscaleProblem
from .prior import GaussianFieldPrior, GridGeometry, as_rng

# ------------------------------------------------------------------------- toy

TOY_FINE_NOISE_MEAN = -0.3
TOY_FINE_NOISE_VAR = 1.5e-3
TOY_DATA_NOISE_VAR = 1e-2
TOY_DATUM = 0.3
TOY_BOX = (-1.5, 2.0)


def toy_mean_response(theta):
    """Modified harmonic mean ``1 / (1 + exp(-theta_1) + exp(-theta_2))``."""
    t = np.atleast_2d(theta)
    return 1.0 / (1.0 + np.exp(-t[:, 0]) + np.exp(-t[:, 1]))


def toy_problem():
    """Two fine parameters with a standard normal prior and one noisy coarse quantity.

    ``gamma = 1/(1 + e^-theta1 + e^-theta2) + eta_f``, ``eta_f ~ N(-0.3, 1.5e-3)``;
    ``d = atan(gamma) + eta_c``, ``eta_c ~ N(0, 1e-2)``.
    """
    prior = GaussianFieldPrior(np.zeros(2), np.eye(2), 1.0, None, None)

    def upscale(theta, rng):
        t = np.atleast_2d(theta)
        eta = TOY_FINE_NOISE_MEAN + np.sqrt(TOY_FINE_NOISE_VAR) * as_rng(rng).standard_normal(t.shape[0])
        return (toy_mean_response(t) + eta)[:, None]

    def loglik(gamma, d):
        r = np.arctan(gamma[0]) - d
        return -0.5 * r * r / TOY_DATA_NOISE_VAR

    def loglik_and_grad(gamma, d):
        g = gamma[0]
        r = np.arctan(g) - d
        return -0.5 * r * r / TOY_DATA_NOISE_VAR, np.array([-r / TOY_DATA_NOISE_VAR / (1 + g * g)])

    return MultiscaleProblem(prior, upscale, 1, loglik, loglik_and_grad,
                             observation_jacobian=lambda g: np.array([[1.0 / (1 + g[0] ** 2)]]),
                             noise_var=TOY_DATA_NOISE_VAR, name="toy")


def toy_exact_logposterior(points, d=TOY_DATUM, n_quad=64):
    """Unnormalized log posterior of ``theta`` with ``gamma`` integrated out.

    The conditional of ``gamma`` given ``theta`` is Gaussian, so the marginal
    likelihood is a Gauss-Hermite sum.
    """
    P = np.atleast_2d(points)
    x, w = np.polynomial.hermite.hermgauss(n_quad)
    m = toy_mean_response(P) + TOY_FINE_NOISE_MEAN
    g = m[:, None] + np.sqrt(2 * TOY_FINE_NOISE_VAR) * x[None, :]
    ll = -0.5 * (np.arctan(g) - d) ** 2 / TOY_DATA_NOISE_VAR
    top = ll.max(axis=1, keepdims=True)
    marg = top[:, 0] + np.log(np.exp(ll - top) @ w / np.sqrt(np.pi))
    return marg - 0.5 * np.sum(P * P, axis=1)


TOY_KL_BOX = (-4.5, 5.5)


def toy_axes(n=201, box=TOY_BOX):
    """Tensor grid axes; the default box is the plotting window."""
    a = np.linspace(box[0], box[1], n)
    return [a, a]


def toy_kl_axes(n=201):
    """Grid wide enough to hold essentially all posterior mass, for KL quadrature."""
    return toy_axes(n, TOY_KL_BOX)


# ---------------------------------------------------------------------- 1D / 2D


def elliptic1d_problem(n_coarse=10, fine_per_coarse=10, sigma2=1.0, corr_length=0.1,
                       noise_var=1e-4, bc=(0.0, 1.0)):
    """Log-normal conductivity on ``[0, 1]`` with heads observed at interior coarse nodes."""
    geom = GridGeometry.line(n_coarse, fine_per_coarse)
    prior = GaussianFieldPrior.exponential(geom, sigma2, corr_length)
    model = msfem.MsFEM1D(geom, bc)

    def upscale(theta, rng=None):
        return np.atleast_2d(msfem.upscale_1d(theta, geom))

    prob = MultiscaleProblem(
        prior, upscale, geom.n_elements,
        loglik=lambda g, d: model.loglik(g, d, noise_var),
        loglik_and_grad=lambda g, d: model.loglik_and_grad(g, d, noise_var),
        observation_jacobian=model.observation_jacobian, noise_var=noise_var,
        upscale_jacobian=lambda th: msfem.upscale_1d_jacobian(th, geom),
        geometry=geom, name="elliptic1d")
    prob.model = model
    return prob


def synthetic_data_1d(problem, seed=0):
    """Truth drawn from the prior, fine Galerkin heads at the observation nodes, plus noise."""
    rng = as_rng(seed)
    theta = problem.prior.sample(1, rng)[0]
    geom = problem.geometry
    heads = msfem.fine_fem_solve_1d(theta, geom, problem.model.bc)
    nodes = problem.model.obs_nodes
    clean = heads[nodes * geom.fine_per_coarse]
    data = clean + np.sqrt(problem.noise_var) * rng.standard_normal(clean.size)
    locations = nodes * geom.coarse_h
    return theta, data, locations


def elliptic2d_problem(n_coarse=4, fine_per_coarse=7, sigma2=1.0, corr_length=0.1,
                       noise_var=1e-6, n_pilot=500, seed=0, reduced=None):
    """Log-normal conductivity on the unit square with reduced elemental integrals.

    The 10-to-6 reduction basis is fitted on ``n_pilot`` prior fields unless
    ``reduced`` is supplied.
    """
    geom = GridGeometry.square(n_coarse, fine_per_coarse)
    prior = GaussianFieldPrior.exponential(geom, sigma2, corr_length)
    if reduced is None:
        pilot = prior.sample(n_pilot, np.random.default_rng(np.random.SeedSequence([seed, 2])))
        E = msfem.elemental_matrices_2d(pilot, geom)
        reduced = msfem.reduce_elemental_2d(msfem.matrix_to_vec10(E))
    model = msfem.MsFEM2D(geom, reduced)

    def upscale(theta, rng=None):
        return np.atleast_2d(msfem.upscale_2d(theta, geom, reduced))

    prob = MultiscaleProblem(
        prior, upscale, 6 * geom.n_elements,
        loglik=lambda g, d: model.loglik(g, d, noise_var),
        loglik_and_grad=lambda g, d: model.loglik_and_grad(g, d, noise_var),
        observation_jacobian=model.observation_jacobian, noise_var=noise_var,
        geometry=geom, name="elliptic2d")
    prob.model = model
    prob.reduced = reduced
    return prob


def synthetic_data_2d(problem, seed=0):
    rng = as_rng(seed)
    theta = problem.prior.sample(1, rng)[0]
    heads = msfem.fine_heads_at_coarse_nodes_2d(theta, problem.geometry)
    nodes = problem.model.obs_nodes
    clean = heads[nodes]
    data = clean + np.sqrt(problem.noise_var) * rng.standard_normal(clean.size)
    return theta, data, problem.model.node_xy[nodes]
