"""Kernel density estimates, grid KL divergences, quantiles and variograms."""
import numpy as np

from .exceptions import EmptySampleSet

QUANTILE_LEVELS = (0.05, 0.25, 0.5, 0.75, 0.95)
_FLOOR = 1e-300


def silverman_bandwidth(samples):
    """Per-coordinate Silverman bandwidth ``sigma_j (4 / ((d+2) n))^(1/(d+4))``."""
    X = _as_samples(samples)
    n, d = X.shape
    sigma = X.std(axis=0, ddof=1) if n > 1 else np.ones(d)
    sigma = np.where(sigma > 0, sigma, 1.0)
    return sigma * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


def _as_samples(samples):
    X = np.asarray(samples, float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] == 0:
        raise EmptySampleSet("no samples to estimate a density from")
    return X


def _kernel_matrix(grid, x, h):
    z = (grid[:, None] - x[None, :]) / h
    return np.exp(-0.5 * z * z) / (np.sqrt(2 * np.pi) * h)


def kde(samples, axes, bandwidth="silverman", chunk=20000):
    """Gaussian product-kernel density on the tensor grid spanned by ``axes``.

    Parameters
    ----------
    samples : array, shape (n,) or (n, d) with d in {1, 2}
    axes : sequence of 1D arrays, one per coordinate
    bandwidth : "silverman", a scalar or one value per coordinate

    Returns
    -------
    array of shape ``(len(axes[0]),)`` or ``(len(axes[0]), len(axes[1]))``.
    """
    X = _as_samples(samples)
    n, d = X.shape
    if len(axes) != d or d > 2:
        raise ValueError("kde supports one or two coordinates with one axis each")
    h = silverman_bandwidth(X) if isinstance(bandwidth, str) else np.broadcast_to(
        np.asarray(bandwidth, float), (d,))
    if isinstance(bandwidth, str) and bandwidth != "silverman":
        raise ValueError(f"unknown bandwidth rule {bandwidth!r}")
    if np.any(h <= 0):
        raise ValueError("bandwidth must be positive")
    axes = [np.asarray(a, float) for a in axes]
    out = np.zeros(tuple(a.size for a in axes))
    for s in range(0, n, chunk):
        block = X[s:s + chunk]
        K1 = _kernel_matrix(axes[0], block[:, 0], h[0])
        if d == 1:
            out += K1.sum(axis=1)
        else:
            out += K1 @ _kernel_matrix(axes[1], block[:, 1], h[1]).T
    return out / n


def trapezoid_weights(axes):
    """Tensor-product trapezoid weights for the grid spanned by ``axes``."""
    ws = []
    for a in axes:
        a = np.asarray(a, float)
        w = np.zeros_like(a)
        dx = np.diff(a)
        w[:-1] += 0.5 * dx
        w[1:] += 0.5 * dx
        ws.append(w)
    W = ws[0]
    for w in ws[1:]:
        W = np.multiply.outer(W, w)
    return W


def grid_points(axes):
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def kl_vs_exact(exact_logdensity, kde_grid, axes):
    """``KL(exact || kde)`` by quadrature on the grid.

    ``exact_logdensity`` is an (unnormalized) log density, either as values on
    the grid or as a callable on ``(n, d)`` points; it is normalized on the
    grid.  The KDE values are used as they are, floored at 1e-300.
    """
    W = trapezoid_weights(axes)
    if callable(exact_logdensity):
        logp = np.asarray(exact_logdensity(grid_points(axes)), float).reshape(W.shape)
    else:
        logp = np.asarray(exact_logdensity, float).reshape(W.shape)
    logp = logp - logp.max()
    p = np.exp(logp)
    Z = np.sum(W * p)
    logp = logp - np.log(Z)
    p = p / Z
    q = np.maximum(np.asarray(kde_grid, float).reshape(W.shape), _FLOOR)
    return float(np.sum(W * p * (logp - np.log(q))))


def quantiles(samples, levels=QUANTILE_LEVELS):
    """Per-coordinate empirical quantiles with linear interpolation.

    Returns an array of shape ``(len(levels), d)``.
    """
    X = _as_samples(samples)
    levels = np.asarray(levels, float)
    if np.any((levels <= 0) | (levels >= 1)) or np.any(np.diff(levels) < 0):
        raise ValueError("levels must be sorted and inside (0, 1)")
    return np.quantile(X, levels, axis=0, method="linear")


def lag1_variogram(fields):
    """Mean squared difference of horizontally and vertically adjacent cells.

    ``fields`` has shape ``(n, ny, nx)`` (2D) or ``(n, nx)`` (1D).
    """
    F = np.asarray(fields, float)
    diffs = [np.diff(F, axis=-1).ravel()]
    if F.ndim == 3:
        diffs.append(np.diff(F, axis=-2).ravel())
    return 0.5 * float(np.mean(np.concatenate(diffs) ** 2))
