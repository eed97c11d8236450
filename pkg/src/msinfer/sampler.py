"""MCMC samplers (DRAM, preconditioned MALA), MAP search and ESS estimators."""
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .exceptions import (LineSearchFailure, NonFiniteGradient, NonFiniteLogDensity,
                         TooFewReplicates)
from .prior import as_rng


@dataclass
class TargetDensity:
    """Unnormalized log density with an optional gradient.

    ``value_and_grad`` may be given instead of (or in addition to) ``grad``
    when the two share work, as with adjoint-based likelihoods.
    """

    logpdf: callable
    dim: int
    grad: callable = None
    value_and_grad: callable = None

    @property
    def has_gradient(self):
        return self.grad is not None or self.value_and_grad is not None

    def both(self, x):
        if self.value_and_grad is not None:
            return self.value_and_grad(x)
        if self.grad is None:
            raise ValueError("target has no gradient")
        return self.logpdf(x), self.grad(x)


@dataclass
class ChainConfig:
    """Settings shared by the samplers.

    ``proposal_cov`` is the initial DRAM proposal covariance or the preMALA
    preconditioner (identity when omitted).  ``scale`` multiplies the DRAM
    proposal standard deviation; ``step_size`` is the preMALA epsilon.
    Scales are tuned toward ``target_accept`` during burn-in and frozen after.
    """

    steps: int
    burn_in: int = None
    seed: object = 0
    start: np.ndarray = None
    proposal_cov: np.ndarray = None
    scale: float = 1.0
    adapt: bool = True
    adapt_interval: int = 100
    dr_stages: int = 2
    dr_scale: float = 0.2
    dr_off_after: int = None
    step_size: float = 0.5
    target_accept: float = None
    tune: bool = True
    store_logpdf: bool = False

    def __post_init__(self):
        if self.burn_in is None:
            self.burn_in = self.steps // 5
        if not self.steps > self.burn_in >= 0:
            raise ValueError("need steps > burn_in >= 0")
        if self.scale <= 0 or self.step_size <= 0 or self.dr_scale <= 0:
            raise ValueError("scales must be positive")
        if self.dr_stages not in (1, 2):
            raise ValueError("dr_stages must be 1 or 2")
        if self.adapt_interval < 1:
            raise ValueError("adapt_interval must be >= 1")


@dataclass
class ChainResult:
    samples: np.ndarray
    acceptance_rate: float
    wall_time: float
    ess: np.ndarray = None
    logpdf: np.ndarray = None
    final_scale: float = None
    info: dict = field(default_factory=dict)

    @property
    def ess_min(self):
        return float(np.min(self.ess))

    @property
    def ess_max(self):
        return float(np.max(self.ess))

    def summary(self):
        return {"acceptance_rate": self.acceptance_rate, "ess_min": self.ess_min,
                "ess_max": self.ess_max, "wall_time": self.wall_time,
                "n_samples": int(self.samples.shape[0]), **self.info}


def _start_point(target, config):
    x = np.zeros(target.dim) if config.start is None else np.array(config.start, float)
    if x.shape != (target.dim,):
        raise ValueError(f"start point has shape {x.shape}, target dim is {target.dim}")
    return x


def _chol(C):
    C = 0.5 * (C + C.T)
    try:
        return linalg.cholesky(C, lower=True)
    except linalg.LinAlgError:
        w, V = linalg.eigh(C)
        return V * np.sqrt(np.clip(w, 1e-12 * max(w.max(), 1e-300), None))


def _sa_gain(k):
    # Robbins-Monro gain for log-scale tuning
    return 1.0 / (k + 1.0) ** 0.6


def dram_run(target, config):
    """Delayed-rejection adaptive Metropolis.

    Stage one proposes ``y1 ~ N(x, s^2 C)``; on rejection stage two proposes
    ``y2 ~ N(x, (dr_scale s)^2 C)`` and accepts with the Tierney-Mira ratio.
    When ``adapt`` is on, ``C`` is replaced every ``adapt_interval`` steps by
    ``2.38^2/d`` times the chain covariance (plus a small ridge).

    With ``adapt=False``, ``tune=False`` and ``dr_stages=1`` each step draws
    one standard-normal vector then one uniform, which is plain random-walk
    Metropolis.
    """
    cfg = config
    rng = as_rng(cfg.seed)
    d = target.dim
    x = _start_point(target, cfg)
    lp = float(target.logpdf(x))
    if not np.isfinite(lp):
        raise NonFiniteLogDensity("log density is not finite at the start point")
    C = np.eye(d) if cfg.proposal_cov is None else np.array(cfg.proposal_cov, float)
    R = _chol(C)
    Rinv = linalg.inv(R)
    log_s = np.log(cfg.scale)
    target_acc = 0.35 if cfg.target_accept is None else cfg.target_accept
    sd = 2.38 ** 2 / d
    ridge = 1e-10

    chain = np.empty((cfg.steps, d))
    lps = np.empty(cfg.steps) if cfg.store_logpdf else None
    n_acc = n_acc1 = 0
    # running sums for the adaptive covariance
    s1 = np.zeros(d)
    s2 = np.zeros((d, d))
    n_hist = 0
    x0 = x.copy()
    t0 = time.perf_counter()
    for k in range(cfg.steps):
        s = np.exp(log_s)
        z = rng.standard_normal(d)
        y1 = x + s * (R @ z)
        lp1 = float(target.logpdf(y1))
        a1 = np.exp(min(0.0, lp1 - lp)) if np.isfinite(lp1) else 0.0
        u = rng.random()
        accepted = u < a1
        if accepted:
            x, lp = y1, lp1
            n_acc1 += 1
        elif cfg.dr_stages == 2 and (cfg.dr_off_after is None or k < cfg.dr_off_after):
            z2 = rng.standard_normal(d)
            y2 = x + cfg.dr_scale * s * (R @ z2)
            lp2 = float(target.logpdf(y2))
            if np.isfinite(lp2):
                # stage-one quantities for the reverse path y2 -> y1
                a1_rev = np.exp(min(0.0, lp1 - lp2)) if np.isfinite(lp1) else 0.0
                w_fwd = Rinv @ (y1 - x) / s
                w_rev = Rinv @ (y1 - y2) / s
                log_q = -0.5 * (w_rev @ w_rev) + 0.5 * (w_fwd @ w_fwd)
                if a1_rev >= 1.0:
                    a2 = 0.0
                else:
                    num = lp2 + log_q + np.log1p(-a1_rev)
                    den = lp + np.log1p(-a1) if a1 < 1.0 else -np.inf
                    a2 = np.exp(min(0.0, num - den))
                if rng.random() < a2:
                    x, lp = y2, lp2
                    accepted = True
        n_acc += accepted
        chain[k] = x
        if lps is not None:
            lps[k] = lp
        if cfg.tune and k < cfg.burn_in:
            log_s += _sa_gain(k) * (a1 - target_acc)
        if cfg.adapt and (k + 1) % cfg.adapt_interval == 0:
            block = chain[n_hist:k + 1] - x0
            s1 += block.sum(axis=0)
            s2 += block.T @ block
            n_hist = k + 1
            if n_hist > d + 1:
                mean = s1 / n_hist
                cov = (s2 - n_hist * np.outer(mean, mean)) / (n_hist - 1)
                scale_diag = max(np.mean(np.diag(cov)), 1e-300)
                R = _chol(sd * cov + ridge * scale_diag * np.eye(d))
                Rinv = linalg.inv(R)
    wall = time.perf_counter() - t0
    kept = chain[cfg.burn_in:]
    return ChainResult(kept, n_acc / cfg.steps, wall, ess_autocorrelation(kept),
                       None if lps is None else lps[cfg.burn_in:], float(np.exp(log_s)),
                       {"sampler": "dram", "steps": cfg.steps, "burn_in": cfg.burn_in,
                        "stage1_acceptance": n_acc1 / cfg.steps})


def mala_log_ratio(target, x, y, eps, P):
    """Log Metropolis-Hastings ratio for the preconditioned Langevin move x -> y."""
    Linv = linalg.inv(linalg.cholesky(P, lower=True))
    lpx, gx = target.both(x)
    lpy, gy = target.both(y)
    return _mala_log_ratio(x, lpx, P @ gx, y, lpy, P @ gy, eps, Linv)


def _mala_log_ratio(x, lpx, Pgx, y, lpy, Pgy, eps, Linv):
    """``Pg*`` are preconditioned gradients; ``Linv`` inverts the Cholesky factor of P."""
    h = 0.5 * eps * eps
    wb = Linv @ (x - y - h * Pgy)
    wf = Linv @ (y - x - h * Pgx)
    return lpy - lpx - 0.5 * (wb @ wb - wf @ wf) / (eps * eps)


def premala_run(target, config):
    """Preconditioned MALA with a fixed preconditioner ``config.proposal_cov``.

    Proposal ``y ~ N(x + eps^2/2 P grad(x), eps^2 P)``; ``eps`` is tuned toward
    ``target_accept`` (default 0.55) during burn-in.
    """
    cfg = config
    if not target.has_gradient:
        raise ValueError("preMALA needs a gradient")
    rng = as_rng(cfg.seed)
    d = target.dim
    x = _start_point(target, cfg)
    lp, g = target.both(x)
    if not np.isfinite(lp):
        raise NonFiniteLogDensity("log density is not finite at the start point")
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("gradient is not finite at the start point")
    P = np.eye(d) if cfg.proposal_cov is None else np.array(cfg.proposal_cov, float)
    P = 0.5 * (P + P.T)
    Pchol = linalg.cholesky(P, lower=True)
    Linv = linalg.inv(Pchol)
    Pg = P @ g
    log_eps = np.log(cfg.step_size)
    target_acc = 0.55 if cfg.target_accept is None else cfg.target_accept

    chain = np.empty((cfg.steps, d))
    lps = np.empty(cfg.steps) if cfg.store_logpdf else None
    n_acc = 0
    t0 = time.perf_counter()
    for k in range(cfg.steps):
        eps = np.exp(log_eps)
        z = rng.standard_normal(d)
        y = x + 0.5 * eps ** 2 * Pg + eps * (Pchol @ z)
        lpy, gy = target.both(y)
        if np.isfinite(lpy) and np.all(np.isfinite(gy)):
            Pgy = P @ gy
            a = np.exp(min(0.0, _mala_log_ratio(x, lp, Pg, y, lpy, Pgy, eps, Linv)))
        else:
            a = 0.0
        if rng.random() < a:
            x, lp, Pg = y, lpy, Pgy
            n_acc += 1
        chain[k] = x
        if lps is not None:
            lps[k] = lp
        if cfg.tune and k < cfg.burn_in:
            log_eps += _sa_gain(k) * (a - target_acc)
    wall = time.perf_counter() - t0
    kept = chain[cfg.burn_in:]
    return ChainResult(kept, n_acc / cfg.steps, wall, ess_autocorrelation(kept),
                       None if lps is None else lps[cfg.burn_in:], float(np.exp(log_eps)),
                       {"sampler": "premala", "steps": cfg.steps, "burn_in": cfg.burn_in})


def run_chains(runner, target, configs, workers=1):
    """Run independent chains, optionally on a thread pool."""
    if workers <= 1:
        return [runner(target, c) for c in configs]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda c: runner(target, c), configs))


# ------------------------------------------------------------------ MAP search


def finite_difference_hessian(grad, x):
    """Symmetrized forward-difference Hessian of ``-log pi`` from its gradient."""
    x = np.asarray(x, float)
    g0 = grad(x)
    H = np.empty((x.size, x.size))
    for i in range(x.size):
        h = 1e-6 * (1.0 + abs(x[i]))
        xp = x.copy()
        xp[i] += h
        H[:, i] = -(grad(xp) - g0) / h
    return 0.5 * (H + H.T)


def gauss_newton_hessian(observation_jacobian, noise_var, prior_precision):
    """Callable ``x -> J^T J / noise_var + prior_precision``."""
    def hess(x):
        J = observation_jacobian(x)
        return J.T @ J / noise_var + prior_precision
    return hess


def finite_difference_jacobian(fun, x):
    x = np.asarray(x, float)
    f0 = np.asarray(fun(x))
    J = np.empty((f0.size, x.size))
    for i in range(x.size):
        h = 1e-6 * (1.0 + abs(x[i]))
        xp = x.copy()
        xp[i] += h
        J[:, i] = (np.asarray(fun(xp)) - f0) / h
    return J


def _make_pd(H):
    H = 0.5 * (H + H.T)
    shift = 0.0
    for _ in range(60):
        try:
            return linalg.cho_factor(H + shift * np.eye(H.shape[0])), H + shift * np.eye(H.shape[0])
        except linalg.LinAlgError:
            shift = max(2 * shift, 1e-8 * max(1.0, np.abs(np.diag(H)).max()))
    raise LineSearchFailure("could not make the Hessian positive definite")


def find_map(target, start, hessian=None, gtol=1e-6, max_iter=200):
    """Maximize ``target`` by line-searched Newton steps.

    ``hessian`` approximates the Hessian of ``-log pi`` (for example a
    Gauss-Newton matrix from :func:`gauss_newton_hessian`); when omitted a
    finite-difference Hessian of the gradient is used.  Returns the MAP point
    and the Hessian there.
    """
    x = np.array(start, float)
    grad = lambda z: target.both(z)[1]
    hess = hessian if hessian is not None else (lambda z: finite_difference_hessian(grad, z))
    lp, g = target.both(x)
    if not np.isfinite(lp):
        raise NonFiniteLogDensity("log density is not finite at the start point")
    for _ in range(max_iter):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("gradient became non-finite")
        if np.linalg.norm(g) <= gtol:
            break
        cho, _ = _make_pd(hess(x))
        p = linalg.cho_solve(cho, g)
        slope = g @ p
        t = 1.0
        for _ls in range(50):
            xn = x + t * p
            lpn, gn = target.both(xn)
            if np.isfinite(lpn) and lpn >= lp + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            if np.linalg.norm(g) <= 10 * gtol:
                break
            raise LineSearchFailure(f"no sufficient increase, |grad| = {np.linalg.norm(g):.3e}")
        if lpn - lp <= 1e-15 * max(1.0, abs(lp)) and np.linalg.norm(gn) >= np.linalg.norm(g):
            x, lp, g = xn, lpn, gn
            break
        x, lp, g = xn, lpn, gn
    H = hess(x)
    return x, 0.5 * (H + H.T)


# ------------------------------------------------------------------------- ESS


def autocorrelation(x):
    """Normalized autocorrelation of a 1D series via FFT."""
    x = np.asarray(x, float)
    n = x.size
    xc = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n]
    if acov[0] <= 0:
        return np.ones(n)
    return acov / acov[0]


def _ess_1d(x):
    n = x.size
    rho = autocorrelation(x)
    if not np.all(np.isfinite(rho)) or np.ptp(x) == 0:
        return float(n)
    # Geyer's initial positive sequence with monotone adjustment
    m = (n - 1) // 2
    pairs = rho[0:2 * m:2] + rho[1:2 * m + 1:2]
    stop = np.flatnonzero(pairs <= 0)
    pairs = pairs[:stop[0]] if stop.size else pairs
    pairs = np.minimum.accumulate(pairs)
    tau = -1.0 + 2.0 * pairs.sum()
    return float(n / max(tau, 1.0 / n))


def ess_autocorrelation(chain):
    """Per-dimension effective sample size of an equilibrium chain."""
    chain = np.asarray(chain, float)
    if chain.ndim == 1:
        chain = chain[:, None]
    if chain.shape[0] < 100:
        raise ValueError("need at least 100 chain steps for the autocorrelation ESS")
    return np.array([_ess_1d(chain[:, j]) for j in range(chain.shape[1])])


def ess_variance_ratio(estimator_replicates, target_variance):
    """``Var(target) / Var(estimator)`` from independent estimator replicates."""
    reps = np.asarray(estimator_replicates, float)
    if reps.shape[0] < 20:
        raise TooFewReplicates(f"need >= 20 replicates, got {reps.shape[0]}")
    return np.asarray(target_variance) / reps.var(axis=0, ddof=1)
