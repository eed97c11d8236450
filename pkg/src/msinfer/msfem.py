"""Multiscale finite elements for ``-div(kappa grad h) = f`` with ``kappa = exp(theta)``.

The coarse parameters are functions of the elemental integrals
``e_ij = int_C kappa grad(phi_i) . grad(phi_j)`` of the multiscale basis:

* 1D: one value per element, ``gamma_C = log e_C``.
* 2D: the 4x4 elemental matrix of a quadrilateral has ten distinct entries
  but only six degrees of freedom; ``gamma`` holds the coordinates of the
  centred entries in an orthonormal 6-column basis (see :func:`reduce_elemental_2d`).

Coarse nodes are ordered left to right (1D) or row-major with x fastest (2D).
"""
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import splu

from .exceptions import RankSurprise, SingularSystem

# exact stiffness of a bilinear square cell with unit conductivity, nodes BL, BR, TR, TL
BILINEAR_STIFFNESS = np.array([[4.0, -1.0, -2.0, -1.0],
                               [-1.0, 4.0, -1.0, -2.0],
                               [-2.0, -1.0, 4.0, -1.0],
                               [-1.0, -2.0, -1.0, 4.0]]) / 6.0

TRIU_I, TRIU_J = np.triu_indices(4)


# =========================================================================== 1D


def elemental_integrals_1d(theta, geom):
    """``e_C = (sum_cells h_f / kappa)^-1`` for every coarse element."""
    theta = np.atleast_2d(theta)
    f = geom.fine_per_coarse
    resist = np.exp(-theta).reshape(theta.shape[0], geom.n_elements, f).sum(axis=2) * geom.fine_h
    out = 1.0 / resist
    return out[0] if np.ndim(theta) == 1 and out.shape[0] == 1 else out


def upscale_1d(theta, geom):
    """Coarse parameters ``gamma_C = log e_C``; accepts one field or a batch."""
    th = np.asarray(theta, float)
    t2 = np.atleast_2d(th)
    f = geom.fine_per_coarse
    # log-sum-exp form of -log(h * sum exp(-theta))
    blocks = -t2.reshape(t2.shape[0], geom.n_elements, f)
    m = blocks.max(axis=2, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(blocks - m).sum(axis=2))
    gamma = -(np.log(geom.fine_h) + lse)
    return gamma[0] if th.ndim == 1 else gamma


def upscale_1d_jacobian(theta, geom):
    """``d gamma / d theta`` for one field (block diagonal, returned dense)."""
    theta = np.asarray(theta, float)
    f = geom.fine_per_coarse
    w = np.exp(-(theta - theta.max())).reshape(geom.n_elements, f)
    w = w / w.sum(axis=1, keepdims=True)
    J = np.zeros((geom.n_elements, theta.size))
    for c in range(geom.n_elements):
        J[c, c * f:(c + 1) * f] = w[c]
    return J


def _tridiag_solve(diag, off, rhs):
    ab = np.zeros((3, diag.size))
    ab[0, 1:] = off
    ab[1] = diag
    ab[2, :-1] = off
    try:
        return linalg.solve_banded((1, 1), ab, rhs, check_finite=False)
    except (linalg.LinAlgError, ValueError) as exc:
        raise SingularSystem(str(exc)) from exc


def solve_coarse_1d(gamma, bc=(0.0, 1.0), load=None):
    """Nodal heads of the coarse 1D system assembled from ``e_C = exp(gamma_C)``.

    Parameters
    ----------
    gamma : array, shape (n_elements,)
    bc : (h_left, h_right) Dirichlet values.
    load : optional assembled right-hand side at all ``n_elements + 1`` nodes.
    """
    e = np.exp(np.asarray(gamma, float))
    n = e.size
    if n < 2:
        raise ValueError("need at least one interior node")
    if not np.all(np.isfinite(e)) or np.all(e == 0):
        raise SingularSystem("elemental integrals under- or overflowed")
    h = np.empty(n + 1)
    h[0], h[-1] = bc
    rhs = np.zeros(n - 1) if load is None else np.array(load[1:-1], float)
    rhs[0] += e[0] * bc[0]
    rhs[-1] += e[-1] * bc[1]
    h[1:-1] = _tridiag_solve(e[:-1] + e[1:], -e[1:-1], rhs)
    return h


def fine_fem_solve_1d(theta, geom, bc=(0.0, 1.0), f=None, quad_order=5):
    """Linear Galerkin FEM on the fine grid; returns heads at all fine nodes.

    ``f`` is an optional source callable evaluated by Gauss quadrature.
    """
    kappa = np.exp(np.asarray(theta, float))
    n = kappa.size
    hf = 1.0 / n
    k = kappa / hf
    rhs = np.zeros(n - 1)
    if f is not None:
        xg, wg = np.polynomial.legendre.leggauss(quad_order)
        left = np.arange(n) * hf
        pts = left[:, None] + 0.5 * hf * (xg + 1)
        fv = f(pts) * (0.5 * hf * wg)
        phi_r = (pts - left[:, None]) / hf  # rising hat on each cell
        load = np.zeros(n + 1)
        load[:-1] += np.sum(fv * (1 - phi_r), axis=1)
        load[1:] += np.sum(fv * phi_r, axis=1)
        rhs += load[1:-1]
    rhs[0] += k[0] * bc[0]
    rhs[-1] += k[-1] * bc[1]
    h = np.empty(n + 1)
    h[0], h[-1] = bc
    h[1:-1] = _tridiag_solve(k[:-1] + k[1:], -k[1:-1], rhs)
    return h


class MsFEM1D:
    """Coarse 1D forward model with Gaussian observations at coarse nodes."""

    def __init__(self, geom, bc=(0.0, 1.0), obs_nodes=None):
        self.geom = geom
        self.bc = tuple(bc)
        n = geom.n_elements
        self.obs_nodes = np.arange(1, n) if obs_nodes is None else np.asarray(obs_nodes)

    @property
    def coarse_dim(self):
        return self.geom.n_elements

    def heads(self, gamma):
        return solve_coarse_1d(gamma, self.bc)

    def observe(self, gamma):
        return self.heads(gamma)[self.obs_nodes]

    def loglik(self, gamma, data, noise_var):
        r = self.observe(gamma) - data
        return -0.5 * (r @ r) / noise_var

    def _adjoint(self, gamma, vec):
        """``lambda = K_II^-1 P^T vec`` extended by zeros on the boundary."""
        e = np.exp(gamma)
        n = e.size
        rhs = np.zeros(n + 1)
        np.add.at(rhs, self.obs_nodes, vec)
        lam = np.zeros(n + 1)
        lam[1:-1] = _tridiag_solve(e[:-1] + e[1:], -e[1:-1], rhs[1:-1])
        return lam

    def grad_loglik(self, gamma, data, noise_var):
        gamma = np.asarray(gamma, float)
        u = self.heads(gamma)
        r = u[self.obs_nodes] - data
        lam = self._adjoint(gamma, r)
        return np.exp(gamma) * np.diff(lam) * np.diff(u) / noise_var

    def loglik_and_grad(self, gamma, data, noise_var):
        gamma = np.asarray(gamma, float)
        u = self.heads(gamma)
        r = u[self.obs_nodes] - data
        lam = self._adjoint(gamma, r)
        return -0.5 * (r @ r) / noise_var, np.exp(gamma) * np.diff(lam) * np.diff(u) / noise_var

    def observation_jacobian(self, gamma):
        """``d observe / d gamma`` via one tangent solve per element."""
        gamma = np.asarray(gamma, float)
        e = np.exp(gamma)
        n = e.size
        u = self.heads(gamma)
        du = np.diff(u)
        # (dK_C u) restricted to interior nodes: +e_C du_C at left node, -e_C du_C at right
        R = np.zeros((n + 1, n))
        idx = np.arange(n)
        R[idx, idx] = -e * du
        R[idx + 1, idx] = e * du
        sol = np.zeros((n + 1, n))
        sol[1:-1] = _tridiag_solve(e[:-1] + e[1:], -e[1:-1], -R[1:-1])
        return sol[self.obs_nodes]


def coarse_likelihood(model, gamma, data, noise_var):
    return model.loglik(gamma, data, noise_var)


def coarse_gradient(model, gamma, data, noise_var):
    return model.grad_loglik(gamma, data, noise_var)


# =========================================================================== 2D


def _local_mesh(f):
    """Node bookkeeping for an element subdivided into f x f cells."""
    nn1 = f + 1
    cell_nodes = []
    for cy in range(f):
        for cx in range(f):
            bl = cy * nn1 + cx
            cell_nodes.append([bl, bl + 1, bl + nn1 + 1, bl + nn1])
    cell_nodes = np.array(cell_nodes)
    iy, ix = np.divmod(np.arange(nn1 * nn1), nn1)
    boundary = (ix == 0) | (ix == f) | (iy == 0) | (iy == f)
    # bilinear corner functions on the element, evaluated at the nodes
    s, t = ix / f, iy / f
    hats = np.column_stack([(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t])
    return cell_nodes, np.flatnonzero(boundary), np.flatnonzero(~boundary), hats


@dataclass
class _LocalOperator:
    scatter: np.ndarray    # (f^2, nn*nn): cell conductivity -> local stiffness entries
    bnd: np.ndarray
    inner: np.ndarray
    hats_bnd: np.ndarray   # boundary values of the four basis functions
    n_nodes: int


_LOCAL_CACHE = {}


def _local_operator(f):
    if f not in _LOCAL_CACHE:
        cell_nodes, bnd, inner, hats = _local_mesh(f)
        nn = (f + 1) ** 2
        P = np.zeros((f * f, nn, nn))
        for c, nodes in enumerate(cell_nodes):
            P[c][np.ix_(nodes, nodes)] += BILINEAR_STIFFNESS
        _LOCAL_CACHE[f] = _LocalOperator(P.reshape(f * f, nn * nn), bnd, inner, hats[bnd], nn)
    return _LOCAL_CACHE[f]


def msfem_basis_2d(theta_patch, f):
    """Elemental matrix of the multiscale basis on one or many element patches.

    ``theta_patch`` holds the ``f*f`` fine log-conductivities of an element in
    local row-major order (shape ``(f*f,)`` or ``(B, f*f)``).  Each basis
    function is discrete-harmonic inside the element and bilinear along its
    edges.  Returns ``(4, 4)`` or ``(B, 4, 4)``.
    """
    th = np.asarray(theta_patch, float)
    t2 = np.atleast_2d(th)
    op = _local_operator(f)
    nn = op.n_nodes
    Kloc = (np.exp(t2) @ op.scatter).reshape(-1, nn, nn)
    Kbb = Kloc[:, op.bnd][:, :, op.bnd]
    Kbi = Kloc[:, op.bnd][:, :, op.inner]
    Kii = Kloc[:, op.inner][:, :, op.inner]
    if op.inner.size:
        try:
            X = np.linalg.solve(Kii, np.transpose(Kbi, (0, 2, 1)))  # Kii^-1 Kib
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(f"local MsFEM solve failed: {exc}") from exc
        S = Kbb - Kbi @ X
    else:
        S = Kbb
    Hb = op.hats_bnd
    E = np.einsum("bi,nij,jc->nbc", Hb.T, S, Hb)
    E = 0.5 * (E + np.transpose(E, (0, 2, 1)))
    return E[0] if th.ndim == 1 else E


def element_patches(theta, geom):
    """Split element-major parameter vectors into ``(B, V, f*f)`` patches."""
    t2 = np.atleast_2d(theta)
    return t2.reshape(t2.shape[0], geom.n_elements, geom.cells_per_element)


def elemental_matrices_2d(theta, geom, chunk=4000):
    """Elemental matrices for every element of every field: ``(B, V, 4, 4)``."""
    P = element_patches(theta, geom)
    B, V, _ = P.shape
    flat = P.reshape(B * V, -1)
    out = np.empty((B * V, 4, 4))
    for s in range(0, B * V, chunk):
        out[s:s + chunk] = msfem_basis_2d(flat[s:s + chunk], geom.fine_per_coarse)
    return out.reshape(B, V, 4, 4)


def matrix_to_vec10(E):
    return np.asarray(E)[..., TRIU_I, TRIU_J]


def vec10_to_matrix(v):
    v = np.asarray(v)
    E = np.zeros(v.shape[:-1] + (4, 4))
    E[..., TRIU_I, TRIU_J] = v
    E[..., TRIU_J, TRIU_I] = v
    return E


@dataclass
class ReducedBasis2D:
    """Orthonormal basis for centred elemental-integral vectors."""

    mean: np.ndarray     # (10,)
    basis: np.ndarray    # (10, 6)
    singular_values: np.ndarray

    @property
    def rank_ratio(self):
        """``sigma_7 / sigma_1`` of the centred sample matrix."""
        s = self.singular_values
        return float(s[6] / s[0]) if s.size > 6 else 0.0

    def project(self, vec10):
        return (np.asarray(vec10) - self.mean) @ self.basis

    def reconstruct(self, coeffs):
        return self.mean + np.asarray(coeffs) @ self.basis.T

    def to_json(self):
        return {"mean": self.mean.tolist(), "basis": self.basis.tolist(),
                "singular_values": self.singular_values.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(np.array(obj["mean"]), np.array(obj["basis"]), np.array(obj["singular_values"]))


def reduce_elemental_2d(vectors, n_keep=6, rank_tol=1e-6):
    """Centred SVD of pooled ten-entry elemental vectors, keeping ``n_keep`` directions.

    Warns with :class:`RankSurprise` if the spectrum does not drop after
    ``n_keep`` values.
    """
    V = np.asarray(vectors, float).reshape(-1, 10)
    if V.shape[0] < 1000:
        raise ValueError("need at least 1000 elemental-integral vectors")
    mean = V.mean(axis=0)
    _, s, Vt = linalg.svd(V - mean, full_matrices=False)
    red = ReducedBasis2D(mean, Vt[:n_keep].T.copy(), s)
    if red.rank_ratio > rank_tol:
        warnings.warn(f"sigma_7/sigma_1 = {red.rank_ratio:.2e} exceeds {rank_tol:g}; "
                      "elemental integrals are not six-dimensional here", RankSurprise,
                      stacklevel=2)
    return red


def upscale_2d(theta, geom, reduced, chunk=4000):
    """Coarse parameters ``(B, 6V)`` (element-major) for a batch of fields."""
    E = elemental_matrices_2d(theta, geom, chunk)
    g = reduced.project(matrix_to_vec10(E))
    out = g.reshape(g.shape[0], -1)
    return out[0] if np.ndim(theta) == 1 else out


def coarse_element_nodes(geom):
    """Global coarse node ids (BL, BR, TR, TL) of every element."""
    nx, ny = geom.coarse_counts
    ex, ey = np.meshgrid(np.arange(nx), np.arange(ny))
    bl = (ey * (nx + 1) + ex).ravel()
    return np.column_stack([bl, bl + 1, bl + nx + 2, bl + nx + 1])


def paper_bc_2d(x, y):
    """Dirichlet data ``h = x`` on y=0 and ``h = 1 - x`` on y=1 (no-flow on x=0,1)."""
    return np.where(y < 0.5, x, 1.0 - x)


def _dirichlet_split(nx, ny):
    nodes = np.arange((nx + 1) * (ny + 1))
    iy = nodes // (nx + 1)
    dir_mask = (iy == 0) | (iy == ny)
    return np.flatnonzero(dir_mask), np.flatnonzero(~dir_mask)


class MsFEM2D:
    """Coarse 2D forward model built from reduced elemental integrals."""

    def __init__(self, geom, reduced, obs_nodes=None):
        self.geom = geom
        self.reduced = reduced
        nx, ny = geom.coarse_counts
        self.n_nodes = (nx + 1) * (ny + 1)
        self.elem_nodes = coarse_element_nodes(geom)
        self.dir_nodes, self.free_nodes = _dirichlet_split(nx, ny)
        iy, ix = np.divmod(np.arange(self.n_nodes), nx + 1)
        self.node_xy = np.column_stack([ix / nx, iy / ny])
        xy = self.node_xy[self.dir_nodes]
        self.dir_values = paper_bc_2d(xy[:, 0], xy[:, 1])
        self.obs_nodes = self.free_nodes if obs_nodes is None else np.asarray(obs_nodes)
        self._dmats = vec10_to_matrix(reduced.basis.T)  # (6, 4, 4)
        # position of each free node within the reduced system
        self._free_pos = -np.ones(self.n_nodes, dtype=int)
        self._free_pos[self.free_nodes] = np.arange(self.free_nodes.size)

    @property
    def coarse_dim(self):
        return 6 * self.geom.n_elements

    def element_matrices(self, gamma):
        g = np.asarray(gamma, float).reshape(self.geom.n_elements, 6)
        return vec10_to_matrix(self.reduced.reconstruct(g))

    def assemble(self, E):
        A = np.zeros((self.n_nodes, self.n_nodes))
        for v, nodes in enumerate(self.elem_nodes):
            A[np.ix_(nodes, nodes)] += E[v]
        return A

    def heads_from_matrices(self, E):
        A = self.assemble(E)
        u = np.zeros(self.n_nodes)
        u[self.dir_nodes] = self.dir_values
        F, D = self.free_nodes, self.dir_nodes
        rhs = -A[np.ix_(F, D)] @ self.dir_values
        try:
            cho = linalg.cho_factor(A[np.ix_(F, F)], check_finite=False)
        except linalg.LinAlgError as exc:
            raise SingularSystem(f"coarse 2D stiffness is not positive definite: {exc}") from exc
        u[F] = linalg.cho_solve(cho, rhs, check_finite=False)
        return u, cho

    def heads(self, gamma):
        return self.heads_from_matrices(self.element_matrices(gamma))[0]

    def observe(self, gamma):
        return self.heads(gamma)[self.obs_nodes]

    def loglik(self, gamma, data, noise_var):
        r = self.observe(gamma) - data
        return -0.5 * (r @ r) / noise_var

    def loglik_and_grad(self, gamma, data, noise_var):
        u, cho = self.heads_from_matrices(self.element_matrices(gamma))
        r = u[self.obs_nodes] - data
        rhs = np.zeros(self.n_nodes)
        np.add.at(rhs, self.obs_nodes, r)
        lam = np.zeros(self.n_nodes)
        lam[self.free_nodes] = linalg.cho_solve(cho, rhs[self.free_nodes], check_finite=False)
        ue = u[self.elem_nodes]      # (V, 4)
        le = lam[self.elem_nodes]
        # d loglik / d gamma_{v,k} = lam_e^T D_k u_e / noise_var
        grad = np.einsum("vi,kij,vj->vk", le, self._dmats, ue) / noise_var
        return -0.5 * (r @ r) / noise_var, grad.ravel()

    def grad_loglik(self, gamma, data, noise_var):
        return self.loglik_and_grad(gamma, data, noise_var)[1]

    def observation_jacobian(self, gamma):
        u, cho = self.heads_from_matrices(self.element_matrices(gamma))
        V = self.geom.n_elements
        R = np.zeros((self.n_nodes, 6 * V))
        ue = u[self.elem_nodes]
        contrib = np.einsum("kij,vj->vki", self._dmats, ue)  # (V, 6, 4)
        for v, nodes in enumerate(self.elem_nodes):
            R[nodes, 6 * v:6 * v + 6] += contrib[v].T
        sol = np.zeros((self.n_nodes, 6 * V))
        sol[self.free_nodes] = -linalg.cho_solve(cho, R[self.free_nodes], check_finite=False)
        return sol[self.obs_nodes]


def fine_fem_solve_2d(theta, geom):
    """Bilinear Galerkin solve on the full fine grid with the boundary data of
    :func:`paper_bc_2d`; returns heads on the ``(ny+1, nx+1)`` fine node grid."""
    kappa = geom.to_grid(np.exp(np.asarray(theta, float)))  # (ny, nx)
    ny, nx = kappa.shape
    n1 = nx + 1
    cy, cx = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    bl = (cy * n1 + cx).ravel()
    nodes = np.column_stack([bl, bl + 1, bl + n1 + 1, bl + n1])
    vals = kappa.ravel()[:, None, None] * BILINEAR_STIFFNESS
    rows = np.repeat(nodes, 4, axis=1).ravel()
    cols = np.tile(nodes, (1, 4)).ravel()
    n_nodes = n1 * (ny + 1)
    A = sparse.csr_matrix((vals.ravel(), (rows, cols)), shape=(n_nodes, n_nodes))
    D, F = _dirichlet_split(nx, ny)
    iy, ix = np.divmod(D, n1)
    uD = paper_bc_2d(ix / nx, iy / ny)
    rhs = -(A[F][:, D] @ uD)
    try:
        uF = splu(A[F][:, F].tocsc()).solve(rhs)
    except RuntimeError as exc:
        raise SingularSystem(str(exc)) from exc
    u = np.zeros(n_nodes)
    u[D] = uD
    u[F] = uF
    return u.reshape(ny + 1, nx + 1)


def fine_heads_at_coarse_nodes_2d(theta, geom):
    u = fine_fem_solve_2d(theta, geom)
    f = geom.fine_per_coarse
    return u[::f, ::f].ravel()
