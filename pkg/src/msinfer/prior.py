"""Gaussian random-field priors on structured 1D/2D grids."""
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

_LOG_2PI = np.log(2.0 * np.pi)


def as_rng(seed):
    """Generator from an int seed, a SeedSequence, or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class GridGeometry:
    """Coarse elements subdivided into fine cells on the unit interval/square.

    Fine-cell (parameter) ordering is element-major: cells of coarse element 0
    first, then element 1, ...; elements and the cells inside one element are
    each ordered row-major (x fastest).  In 1D this is plain left-to-right.
    """

    spatial_dim: int
    coarse_counts: tuple
    fine_per_coarse: int

    def __post_init__(self):
        counts = tuple(int(c) for c in np.atleast_1d(self.coarse_counts))
        object.__setattr__(self, "coarse_counts", counts)
        if self.spatial_dim not in (1, 2) or len(counts) != self.spatial_dim:
            raise ValueError("spatial_dim must be 1 or 2 and match coarse_counts")
        if min(counts) < 1 or self.fine_per_coarse < 1:
            raise ValueError("element counts must be >= 1")

    @classmethod
    def line(cls, n_coarse, fine_per_coarse):
        return cls(1, (n_coarse,), fine_per_coarse)

    @classmethod
    def square(cls, n_coarse, fine_per_coarse):
        return cls(2, (n_coarse, n_coarse), fine_per_coarse)

    @property
    def n_elements(self):
        return int(np.prod(self.coarse_counts))

    @property
    def cells_per_element(self):
        return self.fine_per_coarse ** self.spatial_dim

    @property
    def n_fine(self):
        return self.n_elements * self.cells_per_element

    @property
    def fine_counts(self):
        return tuple(c * self.fine_per_coarse for c in self.coarse_counts)

    @property
    def fine_h(self):
        return 1.0 / self.fine_counts[0]

    @property
    def coarse_h(self):
        return 1.0 / self.coarse_counts[0]

    def cell_grid_index(self):
        """Grid position of every parameter: 1D -> (n,), 2D -> (n, 2) as (ix, iy)."""
        f = self.fine_per_coarse
        if self.spatial_dim == 1:
            return np.arange(self.n_fine)
        nx, _ = self.coarse_counts
        e = np.repeat(np.arange(self.n_elements), f * f)
        local = np.tile(np.arange(f * f), self.n_elements)
        ix = (e % nx) * f + local % f
        iy = (e // nx) * f + local // f
        return np.column_stack([ix, iy])

    def cell_centers(self):
        h = self.fine_h
        idx = self.cell_grid_index()
        return (idx + 0.5) * h if self.spatial_dim == 1 else (idx + 0.5) * h

    def element_of_cell(self):
        return np.repeat(np.arange(self.n_elements), self.cells_per_element)

    def to_grid(self, theta):
        """Reshape parameter vectors to grid arrays: (..., nx) or (..., ny, nx)."""
        theta = np.asarray(theta)
        if self.spatial_dim == 1:
            return theta
        nx, ny = self.fine_counts
        out = np.empty(theta.shape[:-1] + (ny, nx))
        idx = self.cell_grid_index()
        out[..., idx[:, 1], idx[:, 0]] = theta
        return out

    def from_grid(self, grid):
        grid = np.asarray(grid)
        if self.spatial_dim == 1:
            return grid
        idx = self.cell_grid_index()
        return grid[..., idx[:, 1], idx[:, 0]]

    def to_json(self):
        return {"spatial_dim": self.spatial_dim, "coarse_counts": list(self.coarse_counts),
                "fine_per_coarse": self.fine_per_coarse}


def exponential_kernel(x1, x2, sigma2, L):
    """``sigma2 * exp(-||x1 - x2|| / L)`` for single points."""
    if L <= 0 or sigma2 <= 0:
        raise ValueError("sigma2 and L must be positive")
    d = np.linalg.norm(np.atleast_1d(np.asarray(x1, float) - np.asarray(x2, float)))
    return sigma2 * np.exp(-d / L)


def exponential_kernel_matrix(points, sigma2, L):
    P = np.asarray(points, float)
    if P.ndim == 1:
        P = P[:, None]
    return sigma2 * np.exp(-cdist(P, P) / L)


class GaussianFieldPrior:
    """Multivariate normal prior ``N(mean, factor @ factor.T)`` over fine cells."""

    def __init__(self, mean, covariance_factor, sigma2=None, corr_length=None, geometry=None):
        self.mean = np.asarray(mean, float)
        self.covariance_factor = np.asarray(covariance_factor, float)
        self.sigma2 = sigma2
        self.corr_length = corr_length
        self.geometry = geometry
        if self.covariance_factor.shape != (self.dim, self.dim):
            raise ValueError("covariance factor shape does not match the mean")
        self._logdet_half = np.sum(np.log(np.diag(self.covariance_factor)))

    @classmethod
    def exponential(cls, geometry, sigma2=1.0, corr_length=0.1, mean=0.0):
        C = exponential_kernel_matrix(geometry.cell_centers(), sigma2, corr_length)
        factor = linalg.cholesky(C, lower=True)
        mu = np.broadcast_to(np.asarray(mean, float), (geometry.n_fine,)).copy()
        return cls(mu, factor, sigma2, corr_length, geometry)

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def covariance(self):
        return self.covariance_factor @ self.covariance_factor.T

    def sample(self, n, seed=None):
        z = as_rng(seed).standard_normal((n, self.dim))
        return self.mean + z @ self.covariance_factor.T

    def whiten(self, theta):
        dev = np.atleast_2d(theta) - self.mean
        return linalg.solve_triangular(self.covariance_factor, dev.T, lower=True).T

    def logpdf(self, theta):
        w = self.whiten(theta)
        out = -0.5 * np.sum(w * w, axis=1) - self._logdet_half - 0.5 * self.dim * _LOG_2PI
        return out[0] if np.ndim(theta) == 1 else out

    def grad_logpdf(self, theta):
        w = self.whiten(theta)
        g = -linalg.solve_triangular(self.covariance_factor, w.T, lower=True, trans="T").T
        return g[0] if np.ndim(theta) == 1 else g


def sample_field(prior, n, seed=None):
    return prior.sample(n, seed)
