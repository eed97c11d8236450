"""End-to-end multiscale inference: prior sampling, map construction, coarse
MCMC in reference coordinates, prolongation, and sample-budget optimization."""
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .basis import localized_set_1d, total_degree_set
from .exceptions import (ConfigError, DegenerateBudget, MultiscaleError, PipelineError,
                         SingularFit, SingularSystem)
from .prior import as_rng
from .sampler import ChainConfig, TargetDensity, dram_run, find_map, premala_run
from .transport import (BuildOptions, LinearConditionalMap, TriangularMap,
                        build_inverse_regression, build_map, build_stationary_coarse_map,
                        cross_covariance_map)

_LOG_2PI = np.log(2.0 * np.pi)


class MultiscaleProblem:
    """A fine prior, a fine-to-coarse upscaler and a coarse likelihood.

    Parameters
    ----------
    prior : object with ``sample(n, seed)``, ``dim``, ``mean`` and ``covariance``
    upscale : callable ``(theta_batch, rng) -> gamma_batch``
    coarse_dim : int
    loglik : callable ``(gamma, data) -> float``
    loglik_and_grad : callable ``(gamma, data) -> (float, grad)``, optional
    observation_jacobian : callable ``gamma -> d(observation)/d(gamma)``, optional;
        enables Gauss-Newton Hessians together with ``noise_var``
    upscale_jacobian : callable ``theta -> d(gamma)/d(theta)``, optional
    """

    def __init__(self, prior, upscale, coarse_dim, loglik, loglik_and_grad=None,
                 observation_jacobian=None, noise_var=None, upscale_jacobian=None,
                 geometry=None, name="problem"):
        self.prior = prior
        self.upscale = upscale
        self.coarse_dim = int(coarse_dim)
        self.loglik = loglik
        self.loglik_and_grad = loglik_and_grad
        self.observation_jacobian = observation_jacobian
        self.noise_var = noise_var
        self.upscale_jacobian = upscale_jacobian
        self.geometry = geometry
        self.name = name

    @property
    def fine_dim(self):
        return self.prior.dim


# ---------------------------------------------------------------- Algorithm steps


def generate_joint_prior(problem, K, seed=None, chunk=5000):
    """``K`` rows of ``(gamma, theta)`` with the coarse block first."""
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = as_rng(seed)
    theta = problem.prior.sample(K, rng)
    gamma = np.empty((K, problem.coarse_dim))
    for s in range(0, K, chunk):
        gamma[s:s + chunk] = np.asarray(problem.upscale(theta[s:s + chunk], rng)).reshape(
            -1, problem.coarse_dim)
    return np.hstack([gamma, theta])


def coarse_posterior_logdensity(problem, inverse_coarse_map, r_c, data, with_grad=False):
    """Log density of ``r_c`` given the data, up to a constant.

    ``inverse_coarse_map`` maps reference to coarse coordinates
    (``evaluate`` and, for gradients, ``jacobian``).  ``data=None`` drops the
    likelihood, leaving the standard normal log density.  Coarse parameters
    whose system is singular get log density ``-inf``.
    """
    r = np.asarray(r_c, float)
    lp = -0.5 * (r @ r) - 0.5 * r.size * _LOG_2PI
    if data is None:
        return (lp, -r) if with_grad else lp
    gamma = inverse_coarse_map.evaluate(r)
    if with_grad and problem.loglik_and_grad is None:
        raise ValueError("problem provides no likelihood gradient")
    try:
        if not with_grad:
            return lp + problem.loglik(gamma, data)
        ll, g = problem.loglik_and_grad(gamma, data)
    except SingularSystem:
        # non-physical coarse parameters carry zero likelihood
        return (-np.inf, np.full(r.size, np.nan)) if with_grad else -np.inf
    J = inverse_coarse_map.jacobian(r)
    return lp + ll, J.T @ g - r


def prolong(coarse_samples, fine_map, M, seed=None, coarse_dim=None, chunk=20000):
    """Push ``M`` standard-normal ``r_f`` draws per coarse sample through the fine map.

    ``fine_map`` is a :class:`LinearConditionalMap` or a full inverse
    :class:`TriangularMap` over ``(r_c, r_f)`` whose trailing outputs are
    ``theta``.  Returns ``(theta, provenance)`` where ``provenance[k] = (i, j)``.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    rc = np.atleast_2d(np.asarray(coarse_samples, float))
    N, dc = rc.shape
    if isinstance(fine_map, LinearConditionalMap):
        if dc != fine_map.coarse_dim:
            raise ValueError(f"coarse samples have {dc} columns, map expects {fine_map.coarse_dim}")
        df = fine_map.fine_dim
    elif isinstance(fine_map, TriangularMap):
        dc_map = dc if coarse_dim is None else coarse_dim
        if dc != dc_map:
            raise ValueError("coarse samples do not match the map's coarse block")
        df = fine_map.dim - dc
    else:
        raise TypeError("fine_map must be a LinearConditionalMap or a TriangularMap")
    rng = as_rng(seed)
    total = N * M
    theta = np.empty((total, df))
    prov = np.column_stack([np.repeat(np.arange(N), M), np.tile(np.arange(M), N)])
    for s in range(0, total, chunk):
        e = min(s + chunk, total)
        rf = rng.standard_normal((e - s, df))
        rcb = rc[prov[s:e, 0]]
        if isinstance(fine_map, LinearConditionalMap):
            theta[s:e] = fine_map.evaluate(rcb, rf)
        else:
            theta[s:e] = fine_map.evaluate(np.hstack([rcb, rf]))[:, dc:]
    return theta, prov


# ------------------------------------------------------------------------ budget


@dataclass
class BudgetModel:
    """Estimator variance ``C1/N + C2/(N M)`` under cost ``N (t_c + M t_f) = t_tot``."""

    C1: float
    C2: float
    t_c: float
    t_f: float
    t_tot: float = 1.0

    def __post_init__(self):
        if min(self.C1, self.C2, self.t_c, self.t_f, self.t_tot) <= 0:
            raise ValueError("budget constants must all be positive")

    def variance(self, N, M):
        return self.C1 / N + self.C2 / (N * M)


@dataclass
class Allocation:
    N: float
    M_raw: float
    M: int


def optimal_allocation(budget):
    """Optimal coarse sample count ``N*`` and fine samples per coarse ``M*``."""
    b = budget
    root = np.sqrt(b.C1 * b.C2 * b.t_c * b.t_f)
    den_n = b.C1 * b.t_c ** 2 - b.C2 * b.t_c * b.t_f
    den_m = b.C1 * b.t_c - root
    scale = max(b.C1 * b.t_c, b.C2 * b.t_f)
    if abs(den_m) <= 1e-14 * scale or abs(den_n) <= 1e-14 * scale * b.t_c:
        raise DegenerateBudget("C1 t_c equals C2 t_f; the optimum is not unique")
    N = b.t_tot * (b.C1 * b.t_c - root) / den_n
    M_raw = (b.t_c / b.t_f) * ((b.C1 * b.t_c - b.C2 * b.t_f) / den_m - 1.0)
    return Allocation(float(N), float(M_raw), max(1, int(round(M_raw))))


@dataclass
class VarianceFit:
    C1: float
    C2: float
    r2: float


def estimate_variance_constants(N, M, variances, relative=False):
    """Least-squares fit of ``Var = C1/N + C2/(N M)``.

    With ``relative=True`` each equation is divided by its observed variance.
    Negative estimates are clipped to zero with a warning.
    """
    N = np.asarray(N, float).ravel()
    M = np.asarray(M, float).ravel()
    v = np.asarray(variances, float).ravel()
    if not N.size == M.size == v.size:
        raise ValueError("N, M and variances must have equal length")
    A = np.column_stack([1.0 / N, 1.0 / (N * M)])
    w = 1.0 / v if relative else np.ones_like(v)
    Aw = A * w[:, None]
    if np.linalg.matrix_rank(Aw, tol=1e-12 * np.abs(Aw).max()) < 2:
        raise SingularFit("(1/N, 1/(NM)) settings are collinear; need two independent designs")
    coef, *_ = np.linalg.lstsq(Aw, v * w, rcond=None)
    if np.any(coef < 0):
        warnings.warn(f"clipping negative variance constants {coef} to zero", RuntimeWarning,
                      stacklevel=2)
        coef = np.clip(coef, 0.0, None)
    pred = A @ coef
    ss_res = np.sum((v - pred) ** 2)
    ss_tot = np.sum((v - v.mean()) ** 2)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float(ss_res == 0)
    return VarianceFit(float(coef[0]), float(coef[1]), float(r2))


def step_costs_from_timings(N, M, t_on):
    """Per-step costs ``(t_c, t_f)`` from runs obeying ``t_on = N (t_c + M t_f)``.

    Needs at least two runs with different ``M``; more runs are fitted by
    least squares.
    """
    N = np.asarray(N, float).ravel()
    M = np.asarray(M, float).ravel()
    t = np.asarray(t_on, float).ravel()
    A = np.column_stack([N, N * M])
    if np.linalg.matrix_rank(A) < 2:
        raise SingularFit("timing rows must differ in M to separate t_c from t_f")
    (t_c, t_f), *_ = np.linalg.lstsq(A, t, rcond=None)
    return float(t_c), float(t_f)


# ---------------------------------------------------------------------- pipeline


@dataclass
class PipelineOptions:
    """Settings for :func:`run_pipeline`.

    ``fine_map`` selects the coarse-to-fine map: ``"joint"`` (total-degree
    map over all coordinates), ``"local"`` (localized 1D sets) or
    ``"cross_covariance"``.  ``coarse_map`` is ``"triangular"`` or
    ``"stationary"`` (block 2D map; requires ``"cross_covariance"``).
    ``marginal_transform`` sends each stationary block coordinate to normal
    scores before the triangular map is fitted.
    """

    K: int = 50000
    coarse_degree: int = 3
    coarse_inverse_degree: int = None
    fine_map: str = "cross_covariance"
    fine_degree: int = 3
    coarse_map: str = "triangular"
    N: int = 10000
    M: int = 1
    burn_in: int = None
    sampler: str = "premala"
    chain: dict = field(default_factory=dict)
    start_at_map: bool = True
    seed: int = 0
    build: BuildOptions = None
    max_pooled: int = None
    marginal_transform: bool = False

    def validate(self, problem=None):
        if self.N < 1 or self.M < 1:
            raise ConfigError("N and M must be >= 1")
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if self.fine_map not in ("joint", "local", "cross_covariance"):
            raise ConfigError(f"unknown fine map {self.fine_map!r}")
        if self.coarse_map not in ("triangular", "stationary"):
            raise ConfigError(f"unknown coarse map {self.coarse_map!r}")
        if self.coarse_map == "stationary" and self.fine_map != "cross_covariance":
            raise ConfigError("the stationary coarse map is paired with the cross-covariance fine map")
        if self.sampler not in ("dram", "premala"):
            raise ConfigError(f"unknown sampler {self.sampler!r}")
        if self.coarse_degree < 1 or self.fine_degree < 1:
            raise ConfigError("map degrees must be >= 1")
        if self.fine_map == "local" and self.fine_degree % 2 == 0:
            raise ConfigError("localized maps need an odd degree")
        if self.burn_in is not None and self.burn_in < 0:
            raise ConfigError("burn_in must be >= 0")
        if problem is not None and self.fine_map == "local" and problem.geometry is None:
            raise ConfigError("localized maps need the problem geometry")


@dataclass
class PosteriorEnsemble:
    coarse_samples: np.ndarray
    fine_samples: np.ndarray
    provenance: np.ndarray
    metadata: dict
    maps: dict = field(default_factory=dict)
    chain: object = None

    def __post_init__(self):
        N = self.coarse_samples.shape[0]
        if self.fine_samples.shape[0] != N * self.metadata.get("M", 1):
            raise ValueError("fine sample count must equal N*M")


@dataclass
class CoarseTransport:
    """Coarse-block maps: ``to_reference`` (gamma -> r_c) and ``inverse`` (r_c -> gamma)."""

    to_reference: callable
    inverse: object


def _fine_index_sets(problem, opts):
    dc, df = problem.coarse_dim, problem.fine_dim
    if opts.fine_map == "joint":
        return [total_degree_set(dc + i + 1, opts.fine_degree) for i in range(df)]
    finc = problem.geometry.fine_per_coarse
    return [localized_set_1d(i + 1, dc, finc, opts.fine_degree) for i in range(df)]


def build_maps(problem, joint, opts):
    """Step 2 of the algorithm: forward maps, reference pairs and inverse maps.

    Returns ``(coarse_transport, fine_map, info)``.
    """
    dc = problem.coarse_dim
    build = opts.build or BuildOptions()
    gamma, theta = joint[:, :dc], joint[:, dc:]
    inv_deg = opts.coarse_inverse_degree or opts.coarse_degree
    info = {}
    t0 = time.perf_counter()
    if opts.coarse_map == "stationary":
        V = dc // 6
        smap = build_stationary_coarse_map(gamma.reshape(-1, V, 6), opts.coarse_degree, inv_deg,
                                           build, opts.max_pooled, opts.seed,
                                           marginal_transform=opts.marginal_transform)
        transport = CoarseTransport(smap.inverse, smap)
        rc = smap.inverse(gamma)
    else:
        coarse_sets = [total_degree_set(i + 1, opts.coarse_degree) for i in range(dc)]
        inv_sets = [total_degree_set(i + 1, inv_deg) for i in range(dc)]
        if opts.fine_map == "cross_covariance":
            fwd = build_map(gamma, coarse_sets, build)
            rc = fwd.evaluate(gamma)
            inv = build_inverse_regression(rc, gamma, inv_sets)
            transport = CoarseTransport(fwd.evaluate, inv)
        else:
            fine_sets = _fine_index_sets(problem, opts)
            fwd = build_map(joint, coarse_sets + fine_sets, build)
            r = fwd.evaluate(joint)
            inv = build_inverse_regression(r, joint, inv_sets + fine_sets)
            coarse_fwd = TriangularMap(fwd.components[:dc])
            coarse_inv = TriangularMap(inv.components[:dc])
            transport = CoarseTransport(coarse_fwd.evaluate, coarse_inv)
            info["map_build_time"] = time.perf_counter() - t0
            return transport, inv, info
    fine = cross_covariance_map(theta, rc, problem.prior.mean, problem.prior.covariance)
    info["map_build_time"] = time.perf_counter() - t0
    return transport, fine, info


def coarse_target(problem, transport, data):
    inv = transport.inverse
    d = problem.coarse_dim
    return TargetDensity(
        logpdf=lambda r: coarse_posterior_logdensity(problem, inv, r, data),
        dim=d,
        value_and_grad=(lambda r: coarse_posterior_logdensity(problem, inv, r, data, True))
        if problem.loglik_and_grad is not None else None)


def coarse_hessian(problem, transport, data):
    """Gauss-Newton Hessian of ``-log pi(r_c | d)`` when the problem supports it."""
    if problem.observation_jacobian is None or problem.noise_var is None or data is None:
        return None
    inv = transport.inverse

    def hess(r):
        gamma = inv.evaluate(r)
        J = problem.observation_jacobian(gamma) @ inv.jacobian(r)
        return J.T @ J / problem.noise_var + np.eye(r.size)
    return hess


def sample_coarse(problem, transport, data, opts, seed):
    """Step 4: MAP search then MCMC on ``pi(r_c | d)``."""
    target = coarse_target(problem, transport, data)
    start = np.zeros(problem.coarse_dim)
    precond = None
    if opts.start_at_map and target.has_gradient:
        hess = coarse_hessian(problem, transport, data)
        start, H = find_map(target, start, hess)
        precond = linalg.inv(H)
        precond = 0.5 * (precond + precond.T)
    burn = opts.burn_in if opts.burn_in is not None else opts.N // 4
    cfg = ChainConfig(steps=opts.N + burn, burn_in=burn, seed=seed, start=start,
                      proposal_cov=precond, **opts.chain)
    runner = premala_run if opts.sampler == "premala" else dram_run
    if runner is premala_run and not target.has_gradient:
        raise ConfigError("preMALA needs a likelihood gradient")
    return runner(target, cfg), start


def run_pipeline(problem, data, options, maps=None):
    """Run the full multiscale algorithm and return a :class:`PosteriorEnsemble`.

    ``maps`` may carry a previously built ``(coarse_transport, fine_map)``
    pair, in which case prior sampling and map construction are skipped.
    """
    opts = options
    opts.validate(problem)
    seeds = np.random.SeedSequence(opts.seed).spawn(3)

    def stage(name, fn, *args):
        try:
            return fn(*args)
        except MultiscaleError as exc:
            raise PipelineError(name, exc) from exc
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            raise PipelineError(name, exc) from exc

    t0 = time.perf_counter()
    if maps is None:
        joint = stage("prior", generate_joint_prior, problem, opts.K,
                      np.random.default_rng(seeds[0]))
        t_prior = time.perf_counter() - t0
        transport, fine_map, info = stage("maps", build_maps, problem, joint, opts)
    else:
        transport, fine_map = maps
        t_prior, info = 0.0, {"map_build_time": 0.0}
    chain, start = stage("coarse_mcmc", sample_coarse, problem, transport, data, opts,
                         np.random.default_rng(seeds[1]))
    rc = chain.samples
    t1 = time.perf_counter()
    theta, prov = stage("prolong", prolong, rc, fine_map, opts.M, np.random.default_rng(seeds[2]),
                        problem.coarse_dim)
    t_prolong = time.perf_counter() - t1
    steps = chain.info["steps"]
    meta = {
        "N": int(rc.shape[0]), "M": int(opts.M), "seed": opts.seed, "K": opts.K,
        "fine_map": opts.fine_map, "coarse_map": opts.coarse_map,
        "coarse_degree": opts.coarse_degree, "fine_degree": opts.fine_degree,
        "sampler": opts.sampler, "acceptance_rate": chain.acceptance_rate,
        "ess_min": chain.ess_min, "ess_max": chain.ess_max,
        "t_prior": t_prior, "t_maps": info["map_build_time"],
        "t_c": chain.wall_time / steps, "t_f": t_prolong / theta.shape[0],
        "t_on": chain.wall_time + t_prolong, "map_point": start.tolist(),
    }
    return PosteriorEnsemble(rc, theta, prov, meta,
                             {"coarse": transport, "fine": fine_map}, chain)


# ------------------------------------------------------------ fine-scale benchmark


def whitened_fine_target(problem, data):
    """Full-dimensional posterior in whitened prior coordinates ``theta = mu + L z``."""
    Lf = problem.prior.covariance_factor
    mu = problem.prior.mean
    rng = np.random.default_rng(0)

    def theta_of(z):
        return mu + Lf @ z

    def logpdf(z):
        gamma = np.asarray(problem.upscale(theta_of(z)[None, :], rng)).ravel()
        return -0.5 * (z @ z) + problem.loglik(gamma, data)

    vg = None
    if problem.loglik_and_grad is not None and problem.upscale_jacobian is not None:
        def vg(z):
            th = theta_of(z)
            gamma = np.asarray(problem.upscale(th[None, :], rng)).ravel()
            ll, g = problem.loglik_and_grad(gamma, data)
            return -0.5 * (z @ z) + ll, Lf.T @ (problem.upscale_jacobian(th).T @ g) - z
    return TargetDensity(logpdf, problem.fine_dim, value_and_grad=vg), theta_of


def benchmark_chain(problem, data, steps, seed=0, burn_in=None, sampler="dram", **chain_kwargs):
    """Full-dimensional MCMC on ``pi(theta | d)``, started at the MAP point.

    The chain runs in whitened prior coordinates with the inverse Gauss-Newton
    Hessian as initial proposal covariance; samples are returned in ``theta``.
    """
    target, theta_of = whitened_fine_target(problem, data)
    Lf = problem.prior.covariance_factor
    start = np.zeros(problem.fine_dim)
    precond = None
    if target.has_gradient:
        rng = np.random.default_rng(0)

        def hess(z):
            th = theta_of(z)
            gamma = np.asarray(problem.upscale(th[None, :], rng)).ravel()
            J = problem.observation_jacobian(gamma) @ problem.upscale_jacobian(th) @ Lf
            return J.T @ J / problem.noise_var + np.eye(z.size)
        start, H = find_map(target, start, hess)
        precond = linalg.inv(H)
        precond = 0.5 * (precond + precond.T)
    burn = steps // 5 if burn_in is None else burn_in
    cfg = ChainConfig(steps=steps, burn_in=burn, seed=seed, start=start, proposal_cov=precond,
                      **chain_kwargs)
    res = (dram_run if sampler == "dram" else premala_run)(target, cfg)
    z = res.samples
    res.samples = problem.prior.mean + z @ Lf.T
    return res


__all__ = [
    "MultiscaleProblem", "generate_joint_prior", "coarse_posterior_logdensity", "prolong",
    "BudgetModel", "Allocation", "optimal_allocation", "VarianceFit",
    "estimate_variance_constants", "PipelineOptions", "PosteriorEnsemble", "CoarseTransport",
    "build_maps", "coarse_target", "coarse_hessian", "sample_coarse", "run_pipeline",
    "whitened_fine_target", "benchmark_chain", "step_costs_from_timings",
]
