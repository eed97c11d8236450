"""Lower-triangular transport maps built from samples.

Every component ``T_i`` is a Hermite expansion in the (affinely standardized)
inputs ``x_1..x_i``.  Forward maps (target -> reference) are fitted by the
constrained maximum-likelihood problem

    min  -sum_k log (G a)_k
    s.t. G a >= lambda_min,  mean(A a) = 0,  mean((A a)^2) = 1

solved with an augmented Lagrangian and damped Newton inner iterations.
Inverse maps (reference -> target) are fitted by linear least squares on the
pairs ``(T(x), x)``.
"""
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import interpolate, linalg, optimize, stats

from .basis import (MultiIndexSet, _product_columns, hermite_derivative_table,
                    hermite_table, total_degree_set)
from .exceptions import (BracketFailure, ClippedEigenvalueWarning, CovarianceNotPD,
                         InfeasibleStart, MaxIterations, NonMonotonePoint,
                         RankDeficient)

log = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)
_CHUNK_ENTRIES = 4_000_000  # rows * terms per evaluation block


class MapComponent:
    """One output ``T_i`` of a triangular map.

    The component sees inputs ``x[:, :input_dim]`` through the affine
    standardization ``z = (x - shift) / scale`` and evaluates
    ``sum_j coefficients[j] * psi_j(z)``.  The last input is the diagonal one.
    """

    def __init__(self, index_set, coefficients, shift=None, scale=None):
        self.index_set = index_set
        self.coefficients = np.asarray(coefficients, dtype=float).copy()
        n = index_set.dim
        if self.coefficients.shape != (len(index_set),):
            raise ValueError("coefficient vector does not match index set")
        if not np.all(np.isfinite(self.coefficients)):
            raise ValueError("non-finite map coefficients")
        self.shift = np.zeros(n) if shift is None else np.asarray(shift, float).copy()
        self.scale = np.ones(n) if scale is None else np.asarray(scale, float).copy()
        if self.shift.shape != (n,) or self.scale.shape != (n,) or np.any(self.scale <= 0):
            raise ValueError("invalid input standardization")

    @property
    def input_dim(self):
        return self.index_set.dim

    def _table(self, X):
        Z = (np.atleast_2d(X)[:, :self.input_dim] - self.shift) / self.scale
        return hermite_table(Z, max(self.index_set.max_degree, 1))

    def vandermonde(self, X):
        return _product_columns(self._table(X), self.index_set.indices)

    def grad_vandermonde(self, X, k=None):
        """Partials of the basis columns with respect to input ``k`` (default: diagonal)."""
        k = self.input_dim - 1 if k is None else k
        table = self._table(X)
        cols = _product_columns(table, self.index_set.indices,
                                hermite_derivative_table(table), k)
        return cols / self.scale[k]

    def evaluate(self, X):
        return self.vandermonde(X) @ self.coefficients

    def diag_partial(self, X):
        return self.grad_vandermonde(X) @ self.coefficients

    def to_json(self):
        return {"index_set": self.index_set.to_json(),
                "coefficients": self.coefficients.tolist(),
                "input_shift": self.shift.tolist(),
                "input_scale": self.scale.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(MultiIndexSet.from_json(obj["index_set"]), obj["coefficients"],
                   obj.get("input_shift"), obj.get("input_scale"))


class TriangularMap:
    """Ordered collection of components; component ``i`` reads ``x[:i+1]``."""

    def __init__(self, components):
        self.components = list(components)
        for i, c in enumerate(self.components):
            if c.input_dim != i + 1:
                raise ValueError(
                    f"component {i} reads {c.input_dim} inputs; a lower-triangular "
                    f"map requires {i + 1}")
        self._packed = _pack(self.components)

    @property
    def dim(self):
        return len(self.components)

    def _check(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}, got {X.shape[1]}")
        return X, single

    def evaluate(self, X):
        X, single = self._check(X)
        if self._packed is not None:
            out = self._packed.evaluate(X)
        else:
            out = np.column_stack([c.evaluate(X) for c in self.components])
        return out[0] if single else out

    __call__ = evaluate

    def diag_partials(self, X):
        X, single = self._check(X)
        if self._packed is not None:
            out = self._packed.diag_partials(X)
        else:
            out = np.column_stack([c.diag_partial(X) for c in self.components])
        return out[0] if single else out

    def jacobian(self, X):
        """Full (lower-triangular) Jacobian, shape ``(B, d, d)`` or ``(d, d)``."""
        X, single = self._check(X)
        if self._packed is not None:
            J = self._packed.jacobian(X)
        else:
            J = np.zeros((X.shape[0], self.dim, self.dim))
            for i, c in enumerate(self.components):
                for k in range(i + 1):
                    J[:, i, k] = c.grad_vandermonde(X, k) @ c.coefficients
        return J[0] if single else J

    def logdet_jacobian(self, X):
        return logdet_jacobian(self, X)

    def to_json(self):
        return {"dim": self.dim, "components": [c.to_json() for c in self.components]}

    @classmethod
    def from_json(cls, obj):
        comps = [MapComponent.from_json(c) for c in obj["components"]]
        if len(comps) != obj["dim"]:
            raise ValueError("map JSON dim does not match its component count")
        return cls(comps)


class _PackedMap:
    """All components stacked into one term table for vectorized evaluation."""

    def __init__(self, components, shift, scale):
        d = len(components)
        self.dim = d
        self.shift, self.scale = shift, scale
        rows, coefs, owner = [], [], []
        for i, c in enumerate(components):
            idx = np.zeros((len(c.index_set), d), dtype=np.int64)
            idx[:, :c.input_dim] = c.index_set.indices
            rows.append(idx)
            coefs.append(c.coefficients)
            owner.append(np.full(len(c.index_set), i))
        self.idx = np.vstack(rows)
        self.coef = np.concatenate(coefs)
        self.owner = np.concatenate(owner)
        self.max_deg = max(int(self.idx.max()), 1)
        self.active = np.flatnonzero(self.idx.max(axis=0) > 0)
        self.onehot = np.zeros((self.idx.shape[0], d))
        self.onehot[np.arange(self.idx.shape[0]), self.owner] = 1.0
        self.weighted = self.coef[:, None] * self.onehot
        # per input coordinate, the terms with a non-zero degree in it
        self.deriv_terms = [np.flatnonzero(self.idx[:, k] > 0) for k in range(d)]
        # flat positions of each factor in a (d, max_deg + 1) Hermite table
        self.flat_idx = np.arange(d)[None, :] * (self.max_deg + 1) + self.idx

    def _blocks(self, n):
        step = max(1, _CHUNK_ENTRIES // max(self.idx.shape[0], 1))
        for s in range(0, n, step):
            yield slice(s, min(n, s + step))

    def _tables(self, X):
        H = hermite_table((X - self.shift) / self.scale, self.max_deg)
        return H, hermite_derivative_table(H)

    def evaluate(self, X):
        out = np.empty((X.shape[0], self.dim))
        for sl in self._blocks(X.shape[0]):
            H, _ = self._tables(X[sl])
            V = np.ones((H.shape[0], self.idx.shape[0]))
            for d in self.active:
                V *= H[:, d, self.idx[:, d]]
            out[sl] = V @ self.weighted
        return out

    def diag_partials(self, X):
        out = np.empty((X.shape[0], self.dim))
        for sl in self._blocks(X.shape[0]):
            H, dH = self._tables(X[sl])
            V = np.ones((H.shape[0], self.idx.shape[0]))
            for d in range(self.dim):
                own = self.owner == d
                fac = H[:, d, self.idx[:, d]]
                fac[:, own] = dH[:, d, self.idx[own, d]]
                V *= fac
            out[sl] = (V @ self.weighted) / self.scale
        return out

    def jacobian(self, X):
        n, d = X.shape[0], self.dim
        T = self.idx.shape[0]
        out = np.empty((n, d, d))
        flat = self.flat_idx.T
        Wt = self.weighted.T
        step = max(1, _CHUNK_ENTRIES // max(T * d, 1))
        for s in range(0, n, step):
            sl = slice(s, min(n, s + step))
            H, dH = self._tables(X[sl])
            m = H.shape[0]
            F = np.take(H.reshape(m, -1).T, flat, axis=0)  # (d, T, m)
            G = np.take(dH.reshape(m, -1).T, flat, axis=0)
            P = _leave_one_out_product(F)
            P *= G
            J = np.tensordot(Wt, P, axes=([1], [1]))  # (d_out, d_in, m)
            out[sl] = J.transpose(2, 0, 1) / self.scale
        return out


def _leave_one_out_product(F):
    """``P[k] = prod_{j != k} F[j]`` along the first axis."""
    if np.all(F != 0):
        return F.prod(axis=0) / F
    d = F.shape[0]
    P = np.empty_like(F)
    P[0] = 1.0
    for k in range(1, d):
        np.multiply(P[k - 1], F[k - 1], out=P[k])
    suf = np.ones(F.shape[1:])
    for k in range(d - 1, 0, -1):
        suf *= F[k]
        P[k - 1] *= suf
    return P


def _pack(components):
    if not components:
        return None
    d = len(components)
    shift = np.full(d, np.nan)
    scale = np.full(d, np.nan)
    for c in components:
        n = c.input_dim
        known = ~np.isnan(shift[:n])
        if np.any(shift[:n][known] != c.shift[known]) or np.any(scale[:n][known] != c.scale[known]):
            return None
        shift[:n] = c.shift
        scale[:n] = c.scale
    return _PackedMap(components, shift, scale)


def identity_map(dim):
    comps = []
    for i in range(dim):
        J = MultiIndexSet(np.eye(i + 1, dtype=int)[-1:], dim=i + 1)
        comps.append(MapComponent(J, [1.0]))
    return TriangularMap(comps)


def evaluate(tmap, x):
    """``r = T(x)`` for one point or a batch of rows."""
    return tmap.evaluate(x)


def logdet_jacobian(tmap, x):
    """``sum_i log dT_i/dx_i``; raises NonMonotonePoint where a partial is <= 0."""
    D = tmap.diag_partials(x)
    if np.any(D <= 0):
        raise NonMonotonePoint("diagonal partial derivative <= 0; map is not monotone here")
    return np.log(D).sum(axis=-1)


def pullback_logdensity(tmap, x):
    """Log density induced on target space by a standard-normal reference."""
    r = tmap.evaluate(x)
    return -0.5 * np.sum(r * r, axis=-1) - 0.5 * tmap.dim * _LOG_2PI + logdet_jacobian(tmap, x)


# --------------------------------------------------------------------------- build


@dataclass
class BuildOptions:
    """Settings of the augmented Lagrangian map solver."""

    lambda_min: float = 1e-5
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    violation_shrink: float = 4.0
    max_penalty: float = 1e12
    feasibility_tol: float = 1e-9
    kkt_tol: float = 1e-8
    max_outer: int = 60
    max_newton: int = 100
    armijo: float = 1e-4
    standardize: bool = True
    workers: int = 1

    def __post_init__(self):
        if not self.lambda_min > 0:
            raise ValueError("lambda_min must be positive")


class _ComponentProblem:
    """Augmented Lagrangian of the constrained map objective in scaled variables."""

    def __init__(self, A, G, lam):
        K = A.shape[0]
        # column scaling b = D^-1 a keeps the Newton systems well conditioned
        rms = np.sqrt(np.mean(A * A, axis=0))
        rms[rms == 0] = 1.0
        self.D = 1.0 / rms
        self.A = A * self.D
        self.G = G * self.D
        self.K = K
        self.lam = lam
        self.Q = self.A.T @ self.A / K
        self.abar = self.A.mean(axis=0)

    def constraints(self, b):
        g = self.G @ b
        return self.abar @ b, b @ self.Q @ b - 1.0, g

    def merit(self, b, nu1, nu2, mu, rho, g=None, need_derivs=True):
        K = self.K
        g = self.G @ b if g is None else g
        if np.any(g <= 0):
            return np.inf, None, None
        c1 = self.abar @ b
        Qb = self.Q @ b
        c2 = b @ Qb - 1.0
        t = np.maximum(mu - rho * (g - self.lam), 0.0)
        val = (-np.mean(np.log(g)) + nu1 * c1 + nu2 * c2 + 0.5 * rho * (c1 ** 2 + c2 ** 2)
               + np.sum(t * t - mu * mu) / (2.0 * rho * K))
        if not need_derivs:
            return val, None, None
        inv_g = 1.0 / g
        grad = (-(self.G.T @ inv_g) / K + (nu1 + rho * c1) * self.abar
                + 2.0 * (nu2 + rho * c2) * Qb - (self.G.T @ t) / K)
        Gs = self.G * inv_g[:, None]
        H = Gs.T @ Gs / K
        H += rho * np.outer(self.abar, self.abar)
        H += 4.0 * rho * np.outer(Qb, Qb) + 2.0 * (nu2 + rho * c2) * self.Q
        act = t > 0
        if np.any(act):
            Ga = self.G[act]
            H += rho * (Ga.T @ Ga) / K
        return val, grad, H


def _newton_direction(H, grad):
    n = H.shape[0]
    shift = 0.0
    scale = max(np.max(np.abs(np.diag(H))), 1e-12)
    for _ in range(30):
        try:
            cho = linalg.cho_factor(H + shift * np.eye(n), lower=True, check_finite=False)
            return -linalg.cho_solve(cho, grad, check_finite=False)
        except linalg.LinAlgError:
            shift = max(2.0 * shift, 1e-10 * scale)
    return -grad


def _minimize_merit(prob, b, nu1, nu2, mu, rho, opts):
    val, grad, H = prob.merit(b, nu1, nu2, mu, rho)
    gnorm = np.max(np.abs(grad))
    for _ in range(opts.max_newton):
        if gnorm <= 0.1 * opts.kkt_tol:
            break
        step = _newton_direction(H, grad)
        slope = grad @ step
        if slope >= 0:
            step, slope = -grad, -grad @ grad
        if abs(slope) < 1e-12 * max(1.0, abs(val)):
            # merit changes are at roundoff level; accept Newton steps that shrink the gradient
            trial = b + step
            tval, tgrad, tH = prob.merit(trial, nu1, nu2, mu, rho)
            if not np.isfinite(tval) or np.max(np.abs(tgrad)) >= gnorm:
                break
            b, val, grad, H = trial, tval, tgrad, tH
            gnorm = np.max(np.abs(grad))
            continue
        t = 1.0
        while t > 1e-14:
            trial = b + t * step
            tval, _, _ = prob.merit(trial, nu1, nu2, mu, rho, need_derivs=False)
            if np.isfinite(tval) and tval <= val + opts.armijo * t * slope:
                break
            t *= 0.5
        else:
            break  # no further decrease possible at working precision
        b = trial
        val, grad, H = prob.merit(b, nu1, nu2, mu, rho)
        new_norm = np.max(np.abs(grad))
        if abs(t * slope) < 1e-15 * max(1.0, abs(val)) and new_norm >= gnorm:
            gnorm = new_norm
            break
        gnorm = new_norm
    return b, gnorm


def _solve_constrained(A, G, lam, b0_unscaled, opts):
    prob = _ComponentProblem(A, G, lam)
    b = b0_unscaled / prob.D
    if np.any(prob.G @ b <= lam):
        raise InfeasibleStart("initial coefficients violate the monotonicity constraint")
    nu1 = nu2 = 0.0
    mu = np.zeros(A.shape[0])
    rho = opts.penalty_init
    prev_viol = np.inf
    for outer in range(opts.max_outer):
        b, gnorm = _minimize_merit(prob, b, nu1, nu2, mu, rho, opts)
        c1, c2, g = prob.constraints(b)
        viol = max(abs(c1), abs(c2), max(0.0, lam - g.min()))
        nu1 += rho * c1
        nu2 += rho * c2
        mu = np.maximum(mu - rho * (g - lam), 0.0)
        log.debug("outer %d: violation %.3e (c1 %.1e c2 %.1e ineq %.1e, active %d), grad %.3e, rho %.1e", outer, viol, c1, c2, lam - g.min(), int(np.sum(mu > 0)), gnorm, rho)
        if viol <= opts.feasibility_tol and gnorm <= opts.kkt_tol:
            return b * prob.D
        if viol > prev_viol / opts.violation_shrink:
            rho = min(rho * opts.penalty_growth, opts.max_penalty)
        prev_viol = viol
    raise MaxIterations(
        f"augmented Lagrangian did not converge in {opts.max_outer} outer iterations "
        f"(violation {viol:.2e}, gradient {gnorm:.2e})")


def _standardization(X, standardize):
    if not standardize:
        return np.zeros(X.shape[1]), np.ones(X.shape[1])
    shift = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    return shift, scale


def build_component(samples, index_set, opts=None, shift=None, scale=None):
    """Fit one forward-map component from target samples.

    ``samples`` is ``(K, n)`` with ``n >= index_set.dim``; the component's
    diagonal input is coordinate ``index_set.dim - 1``.  Standardization
    factors are computed from the samples unless given.
    """
    opts = opts or BuildOptions()
    X = np.asarray(samples, dtype=float)[:, :index_set.dim]
    K, n = X.shape
    if K <= len(index_set):
        raise ValueError(f"need more samples ({K}) than basis terms ({len(index_set)})")
    if shift is None or scale is None:
        shift, scale = _standardization(X, opts.standardize)
    comp = MapComponent(index_set, np.zeros(len(index_set)), shift, scale)
    unit = np.zeros(n, dtype=int)
    unit[-1] = 1
    pos = index_set.position(unit)
    if pos < 0:
        raise InfeasibleStart("index set lacks the linear diagonal term for the identity start")
    A = comp.vandermonde(X)
    G = comp.grad_vandermonde(X)
    a0 = np.zeros(len(index_set))
    a0[pos] = 1.0
    # identity start on standardized data already has zero mean and unit variance;
    # recentre in case no standardization was applied
    const = index_set.position(np.zeros(n, dtype=int))
    out0 = A @ a0
    if const >= 0:
        a0[const] -= out0.mean()
        out0 = A @ a0
    a0 /= np.sqrt(np.mean(out0 ** 2))
    comp.coefficients = _solve_constrained(A, G, opts.lambda_min, a0, opts)
    return comp


def build_map(samples, index_sets, opts=None):
    """Forward map from samples, one independent fit per output coordinate."""
    opts = opts or BuildOptions()
    X = np.asarray(samples, dtype=float)
    for i, J in enumerate(index_sets):
        if J.dim != i + 1:
            raise ValueError(f"index set {i} has input dim {J.dim}; triangularity requires {i + 1}")
    if X.shape[1] != len(index_sets):
        raise ValueError("sample dimension does not match the number of index sets")
    shift, scale = _standardization(X, opts.standardize)

    def one(i):
        try:
            return build_component(X[:, :i + 1], index_sets[i], opts, shift[:i + 1], scale[:i + 1])
        except Exception as exc:
            raise type(exc)(f"component {i}: {exc}") from exc

    if opts.workers > 1:
        with ThreadPoolExecutor(opts.workers) as pool:
            comps = list(pool.map(one, range(len(index_sets))))
    else:
        comps = [one(i) for i in range(len(index_sets))]
    return TriangularMap(comps)


def build_inverse_regression(reference, target, index_sets, rank_tol=1e-11):
    """Least-squares map from reference points ``r`` to target points ``x``.

    Component ``i`` regresses ``x_i`` on the basis ``index_sets[i]`` evaluated
    at ``r_1..r_i`` via a QR factorization of the Vandermonde matrix.
    """
    R = np.atleast_2d(np.asarray(reference, dtype=float))
    X = np.atleast_2d(np.asarray(target, dtype=float))
    comps = []
    for i, J in enumerate(index_sets):
        if len(J) == 0:
            raise ValueError(f"index set {i} is empty")
        if J.dim != i + 1:
            raise ValueError(f"index set {i} has input dim {J.dim}; triangularity requires {i + 1}")
        if R.shape[0] <= len(J):
            raise ValueError("need more sample pairs than basis terms")
        comp = MapComponent(J, np.zeros(len(J)))
        V = comp.vandermonde(R)
        rms = np.sqrt(np.mean(V * V, axis=0))
        rms[rms == 0] = 1.0
        Qm, Rm = linalg.qr(V / rms, mode="economic", check_finite=False)
        diag = np.abs(np.diag(Rm))
        if diag.min() <= rank_tol * diag.max():
            raise RankDeficient(f"regression matrix of component {i} is rank deficient")
        coef = linalg.solve_triangular(Rm, Qm.T @ X[:, i], check_finite=False)
        comp.coefficients = coef / rms
        comps.append(comp)
    return TriangularMap(comps)


def invert_pointwise(tmap, r, tol=1e-10, max_expand=60):
    """Solve ``T(x) = r`` one coordinate at a time with bracketed root finding."""
    r = np.asarray(r, dtype=float)
    if r.shape != (tmap.dim,):
        raise ValueError("reference point has the wrong dimension")
    x = np.zeros(tmap.dim)
    for i, comp in enumerate(tmap.components):
        row = x[:i + 1].copy()

        def resid(t):
            row[i] = t
            return comp.evaluate(row)[0] - r[i]

        centre, width = comp.shift[i], comp.scale[i]
        lo, hi = centre - width, centre + width
        flo, fhi = resid(lo), resid(hi)
        for _ in range(max_expand):
            if flo <= 0 <= fhi:
                break
            span = hi - lo
            if flo > 0:
                lo -= span
                flo = resid(lo)
            if fhi < 0:
                hi += span
                fhi = resid(hi)
        else:
            raise BracketFailure(f"no sign change for component {i} (map not monotone far out)")
        x[i] = optimize.brentq(resid, lo, hi, xtol=tol * 1e-3, rtol=4 * np.finfo(float).eps,
                               maxiter=500)
        # polish with Newton while it helps
        for _ in range(3):
            row[i] = x[i]
            f = comp.evaluate(row)[0] - r[i]
            if abs(f) <= tol:
                break
            dfdx = comp.diag_partial(row)[0]
            if dfdx > 0:
                x[i] -= f / dfdx
    return x


def invert_batch(tmap, R, tol=1e-10):
    R = np.atleast_2d(R)
    return np.array([invert_pointwise(tmap, r, tol) for r in R])


# ------------------------------------------------------------- linear fine maps


@dataclass
class LinearConditionalMap:
    """``theta = mean + gain @ r_c + noise_factor @ r_f``."""

    mean: np.ndarray
    gain: np.ndarray
    noise_factor: np.ndarray

    @property
    def coarse_dim(self):
        return self.gain.shape[1]

    @property
    def fine_dim(self):
        return self.mean.shape[0]

    @property
    def conditional_cov(self):
        return self.noise_factor @ self.noise_factor.T

    def evaluate(self, r_c, r_f):
        r_c = np.atleast_2d(r_c)
        r_f = np.atleast_2d(r_f)
        if r_c.shape[1] != self.coarse_dim or r_f.shape[1] != self.fine_dim:
            raise ValueError("reference blocks have the wrong dimension")
        return self.mean + r_c @ self.gain.T + r_f @ self.noise_factor.T


def symmetric_sqrt(S, name="matrix"):
    """Symmetric PSD square root with negative eigenvalues clipped to zero."""
    S = 0.5 * (S + S.T)
    w, U = linalg.eigh(S)
    clipped = -w[w < 0].sum()
    if clipped > 1e-6 * max(np.trace(S), np.finfo(float).tiny):
        warnings.warn(f"clipped negative eigenvalue mass {clipped:.3e} from {name}; "
                      "too few samples for the cross-covariance estimate",
                      ClippedEigenvalueWarning, stacklevel=3)
    w = np.clip(w, 0.0, None)
    return (U * np.sqrt(w)) @ U.T


def cross_covariance_map(theta_samples, rc_samples, prior_mean=None, prior_cov=None):
    """Linear conditional map from the empirical cross-covariance of ``(r_c, theta)``.

    ``prior_mean``/``prior_cov`` default to the sample estimates.
    """
    theta = np.atleast_2d(np.asarray(theta_samples, dtype=float))
    rc = np.atleast_2d(np.asarray(rc_samples, dtype=float))
    if theta.shape[0] != rc.shape[0]:
        raise ValueError("theta and r_c samples must be paired")
    K = theta.shape[0]
    mu = theta.mean(axis=0) if prior_mean is None else np.asarray(prior_mean, float)
    tc = theta - theta.mean(axis=0)
    rcc = rc - rc.mean(axis=0)
    cross = rcc.T @ tc / (K - 1)  # Sigma_{r_c theta}, shape (d_c, d_theta)
    if prior_cov is None:
        Stt = tc.T @ tc / (K - 1)
    else:
        Stt = np.asarray(prior_cov, float)
    cond = Stt - cross.T @ cross
    return LinearConditionalMap(mu.copy(), cross.T.copy(), symmetric_sqrt(cond, "conditional covariance"))


# ------------------------------------------------------- stationary 2D coarse maps


class MarginalGaussianizer:
    """Per-coordinate monotone transform to standard normal scores.

    Each coordinate is interpolated (PCHIP, monotone) between its empirical
    quantiles ``knots_x[:, j]`` at the equally spaced normal scores
    ``knots_u``.  :meth:`evaluate` (x -> u) extrapolates linearly beyond the
    outer knots; :meth:`inverse` (u -> x) holds the outer quantiles, so the
    pushforward never leaves the sampled range.
    """

    def __init__(self, knots_x, knots_u):
        self.knots_x = np.asarray(knots_x, float)
        self.knots_u = np.asarray(knots_u, float)
        if self.knots_x.ndim != 2 or self.knots_x.shape[0] != self.knots_u.size:
            raise ValueError("knots_x must have shape (n_knots, dim)")
        if np.any(np.diff(self.knots_x, axis=0) <= 0) or np.any(np.diff(self.knots_u) <= 0):
            raise ValueError("quantile knots must be strictly increasing")
        self._fwd = [interpolate.PchipInterpolator(self.knots_x[:, j], self.knots_u)
                     for j in range(self.dim)]
        self._bwd = [interpolate.PchipInterpolator(self.knots_u, self.knots_x[:, j])
                     for j in range(self.dim)]
        self._dbwd = [f.derivative() for f in self._bwd]

    @classmethod
    def fit(cls, X, n_knots=513):
        """Quantile knots from samples ``X`` of shape ``(n, dim)``."""
        X = np.asarray(X, float)
        umax = stats.norm.ppf(1.0 - 1.0 / (X.shape[0] + 1))
        u = np.linspace(-umax, umax, n_knots)
        return cls(np.quantile(X, stats.norm.cdf(u), axis=0), u)

    @property
    def dim(self):
        return self.knots_x.shape[1]

    def evaluate(self, X):
        """Normal scores of ``X`` (any shape ending in ``dim``)."""
        X = np.asarray(X, float)
        out = np.empty_like(X)
        for j, f in enumerate(self._fwd):
            lo, hi = self.knots_x[0, j], self.knots_x[-1, j]
            x = X[..., j]
            y = f(np.clip(x, lo, hi))
            y = np.where(x < lo, self.knots_u[0] + f(lo, 1) * (x - lo), y)
            out[..., j] = np.where(x > hi, self.knots_u[-1] + f(hi, 1) * (x - hi), y)
        return out

    def inverse(self, U):
        """Target coordinates for normal scores ``U``."""
        U = np.clip(np.asarray(U, float), self.knots_u[0], self.knots_u[-1])
        return np.stack([f(U[..., j]) for j, f in enumerate(self._bwd)], axis=-1)

    def inverse_derivative(self, U):
        """Diagonal of ``d inverse / d U``; zero outside the knot range."""
        U = np.asarray(U, float)
        inside = (U >= self.knots_u[0]) & (U <= self.knots_u[-1])
        d = np.stack([f(np.clip(U[..., j], self.knots_u[0], self.knots_u[-1]))
                      for j, f in enumerate(self._dbwd)], axis=-1)
        return np.where(inside, d, 0.0)

    def to_json(self):
        return {"knots_x": self.knots_x.tolist(), "knots_u": self.knots_u.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["knots_x"], obj["knots_u"])


class StationaryCoarseMap:
    """Coarse map for a stationary prior on ``V`` identical ``m``-dim blocks.

    ``forward_marginal`` maps one block of target coordinates to reference
    (the ``T`` direction), ``inverse_marginal`` is its regression inverse, and
    ``cholesky_L`` factors the covariance of the stacked per-block references.
    An optional ``marginal_transform`` (a :class:`MarginalGaussianizer`) is
    applied to each block before ``forward_marginal``; the composition stays
    triangular and monotone.
    Blocks are stored element-major: ``gamma[6*v:6*v+6]`` belongs to element ``v``.
    """

    def __init__(self, forward_marginal, inverse_marginal, cholesky_L, marginal_transform=None):
        self.forward_marginal = forward_marginal
        self.inverse_marginal = inverse_marginal
        self.cholesky_L = np.asarray(cholesky_L, float)
        self.marginal_transform = marginal_transform
        self.block = forward_marginal.dim
        if self.cholesky_L.shape[0] % self.block:
            raise ValueError("Cholesky factor size is not a multiple of the block size")
        self.n_blocks = self.cholesky_L.shape[0] // self.block

    @property
    def dim(self):
        return self.cholesky_L.shape[0]

    def evaluate(self, r_c):
        """``gamma = S_c(r_c)`` for one or many reference vectors."""
        r = np.atleast_2d(r_c)
        z = r @ self.cholesky_L.T
        g = self.inverse_marginal.evaluate(z.reshape(-1, self.block))
        if self.marginal_transform is not None:
            g = self.marginal_transform.inverse(g)
        g = g.reshape(r.shape[0], self.dim)
        return g[0] if np.ndim(r_c) == 1 else g

    def jacobian(self, r_c):
        """``d gamma / d r_c`` at a single point."""
        z = (self.cholesky_L @ np.asarray(r_c, float)).reshape(self.n_blocks, self.block)
        Jm = self.inverse_marginal.jacobian(z)  # (V, m, m)
        if self.marginal_transform is not None:
            d = self.marginal_transform.inverse_derivative(self.inverse_marginal.evaluate(z))
            Jm = d[:, :, None] * Jm
        out = np.empty((self.dim, self.dim))
        m = self.block
        for v in range(self.n_blocks):
            out[v * m:(v + 1) * m] = Jm[v] @ self.cholesky_L[v * m:(v + 1) * m]
        return out

    def inverse(self, gamma):
        """``r_c = L^-1 [T_m(gamma_1); ...; T_m(gamma_V)]``."""
        g = np.atleast_2d(gamma)
        blocks = g.reshape(-1, self.block)
        if self.marginal_transform is not None:
            blocks = self.marginal_transform.evaluate(blocks)
        rm = self.forward_marginal.evaluate(blocks).reshape(g.shape[0], self.dim)
        rc = linalg.solve_triangular(self.cholesky_L, rm.T, lower=True).T
        return rc[0] if np.ndim(gamma) == 1 else rc


def build_stationary_coarse_map(element_samples, degree=3, inverse_degree=None, opts=None,
                                max_pooled=None, seed=0, marginal_transform=False, n_knots=513):
    """Fit a :class:`StationaryCoarseMap` from per-element samples ``(K, V, m)``.

    The ``m``-dim marginal map is fitted on samples pooled over elements
    (optionally subsampled to ``max_pooled`` rows), then the covariance of the
    per-element reference blocks is Cholesky factored.  With
    ``marginal_transform`` each coordinate is first sent to normal scores by a
    :class:`MarginalGaussianizer` fitted on all pooled rows; this tames heavy
    marginal tails that a polynomial map cannot compress.  With ``degree=1``
    the result is a Gaussian copula with exact empirical marginals.
    """
    S = np.asarray(element_samples, dtype=float)
    if S.ndim != 3:
        raise ValueError("element samples must have shape (K, V, m)")
    K, V, m = S.shape
    gauss = None
    if marginal_transform:
        gauss = MarginalGaussianizer.fit(S.reshape(K * V, m), n_knots)
        S = gauss.evaluate(S)
    pooled = S.reshape(K * V, m)
    if max_pooled is not None and pooled.shape[0] > max_pooled:
        rng = np.random.default_rng(seed)
        pooled = pooled[rng.choice(pooled.shape[0], max_pooled, replace=False)]
    inverse_degree = degree if inverse_degree is None else inverse_degree
    sets = [total_degree_set(i + 1, degree) for i in range(m)]
    fwd = build_map(pooled, sets, opts)
    r_pooled = fwd.evaluate(pooled)
    inv = build_inverse_regression(r_pooled, pooled,
                                   [total_degree_set(i + 1, inverse_degree) for i in range(m)])
    rm = fwd.evaluate(S.reshape(K * V, m)).reshape(K, V * m)
    cov = np.cov(rm, rowvar=False)
    try:
        L = linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError as exc:
        raise CovarianceNotPD(f"covariance of per-element references is not PD: {exc}") from exc
    return StationaryCoarseMap(fwd, inv, L, gauss)
