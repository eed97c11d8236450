"""Probabilists' Hermite polynomial bases and multi-index sets.

A multi-index ``j`` assigns a polynomial degree to every input coordinate;
the corresponding basis function is ``prod_d He_{j_d}(x_d)``.  Index sets are
stored as integer arrays of shape ``(n_terms, dim)`` in graded lexicographic
order, which fixes the coefficient layout of every map component.
"""
import itertools
from math import comb

import numpy as np


class MultiIndexSet:
    """An ordered, duplicate-free collection of multi-indices.

    Parameters
    ----------
    indices : array_like of int, shape (n_terms, dim)
    dim : int, optional
        Input dimension; inferred from ``indices`` when omitted.
    sort : bool
        Put the indices in graded lexicographic order (the default).
    """

    def __init__(self, indices, dim=None, sort=True):
        arr = np.asarray(indices, dtype=np.int64)
        if arr.ndim == 1:
            arr = arr.reshape(-1, dim if dim is not None else arr.size)
        if dim is None:
            dim = arr.shape[1]
        if arr.shape[1] != dim:
            raise ValueError(f"indices have {arr.shape[1]} columns, expected dim={dim}")
        if np.any(arr < 0):
            raise ValueError("multi-index entries must be non-negative")
        rows = {tuple(r) for r in arr.tolist()}
        if len(rows) != arr.shape[0]:
            raise ValueError("duplicate multi-indices")
        if sort and arr.shape[0] > 0:
            arr = np.array(sorted(rows, key=_grlex_key), dtype=np.int64).reshape(-1, dim)
        self.indices = arr
        self.indices.setflags(write=False)
        self.dim = int(dim)

    def __len__(self):
        return self.indices.shape[0]

    def __iter__(self):
        return (tuple(r) for r in self.indices.tolist())

    def __contains__(self, j):
        j = tuple(int(v) for v in j)
        return any(j == r for r in self)

    def __eq__(self, other):
        return (isinstance(other, MultiIndexSet) and self.dim == other.dim
                and np.array_equal(self.indices, other.indices))

    def __repr__(self):
        return f"MultiIndexSet(dim={self.dim}, n_terms={len(self)})"

    @property
    def max_degree(self):
        return int(self.indices.max()) if len(self) else 0

    def position(self, j):
        """Row of multi-index ``j``, or -1 if absent."""
        hits = np.flatnonzero(np.all(self.indices == np.asarray(j), axis=1))
        return int(hits[0]) if hits.size else -1

    def active_dims(self):
        """Coordinates with at least one non-zero degree."""
        return np.flatnonzero(self.indices.max(axis=0) > 0) if len(self) else np.array([], int)

    def is_downward_closed(self):
        present = set(self)
        for j in present:
            for d, deg in enumerate(j):
                if deg > 0:
                    lower = list(j)
                    lower[d] -= 1
                    if tuple(lower) not in present:
                        return False
        return True

    def union(self, other):
        if self.dim != other.dim:
            raise ValueError("cannot merge index sets of different dimension")
        rows = set(self) | set(other)
        return MultiIndexSet(sorted(rows), dim=self.dim)

    def to_json(self):
        return {"dim": self.dim, "indices": self.indices.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(np.asarray(obj["indices"], dtype=np.int64).reshape(-1, obj["dim"]),
                   dim=obj["dim"], sort=False)


def _grlex_key(j):
    # total degree first; within a degree, larger leading exponents first
    return (sum(j), tuple(-v for v in j))


def total_degree_set(dim, degree):
    """All multi-indices in ``dim`` variables with 1-norm at most ``degree``."""
    if dim < 1 or degree < 0:
        raise ValueError("need dim >= 1 and degree >= 0")
    rows = []
    for total in range(degree + 1):
        for bars in itertools.combinations(range(total + dim - 1), dim - 1):
            # stars-and-bars enumeration of compositions of `total`
            prev, parts = -1, []
            for b in bars:
                parts.append(b - prev - 1)
                prev = b
            parts.append(total + dim - 1 - prev - 1)
            rows.append(tuple(parts))
    out = MultiIndexSet(rows, dim=dim)
    assert len(out) == comb(dim + degree, degree)
    return out


def linear_set(dim):
    """Constant plus one linear term per coordinate."""
    return total_degree_set(dim, 1)


def coarse_element_of(i, finc):
    """Coarse element (1-based) that owns fine output ``i`` (1-based)."""
    return (i - 1) // finc + 1


def localized_set_1d(i, d_c, finc, degree):
    """Index set for fine output ``i`` of a 1D coarse/fine map.

    Linear terms in all ``d_c + i`` inputs, plus every term of total degree
    ``<= degree`` involving only the owning coarse input and the fine input
    itself.  Inputs are ordered coarse block first.

    Parameters
    ----------
    i : int
        1-based fine output index.
    d_c : int
        Number of coarse inputs.
    finc : int
        Fine cells per coarse element.
    degree : int
        Odd maximum degree of the local nonlinear block.
    """
    if degree < 1 or degree % 2 == 0:
        raise ValueError(f"localized degree must be odd and >= 1, got {degree}")
    if i < 1:
        raise ValueError("fine output index is 1-based")
    dim = d_c + i
    rho = coarse_element_of(i, finc)
    if rho > d_c:
        raise ValueError(f"fine output {i} lies outside the {d_c} coarse elements")
    rows = set(linear_set(dim))
    a, b = rho - 1, dim - 1  # zero-based coordinates
    for p in range(degree + 1):
        for q in range(degree + 1 - p):
            j = [0] * dim
            j[a] += p
            j[b] += q
            rows.add(tuple(j))
    return MultiIndexSet(sorted(rows), dim=dim)


def localized_set_size_formula(i, d_c, degree):
    """Term count quoted for the localized set, which counts the constant
    and the two local linear terms twice; ``len(localized_set_1d(...))`` is
    this value minus two."""
    return i + d_c + (degree + 1) * (degree + 2) // 2


def hermite(order, x):
    """Probabilists' Hermite polynomial ``He_order`` evaluated at ``x``."""
    x = np.asarray(x, dtype=float)
    if order < 0:
        raise ValueError("order must be non-negative")
    prev, cur = np.ones_like(x), x
    if order == 0:
        return prev if prev.ndim else float(prev)
    for n in range(1, order):
        prev, cur = cur, x * cur - n * prev
    return cur if cur.ndim else float(cur)


def hermite_table(x, max_order):
    """Values ``He_0..He_max_order`` at ``x``; shape ``x.shape + (max_order+1,)``."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (max_order + 1,))
    out[..., 0] = 1.0
    if max_order >= 1:
        out[..., 1] = x
    for n in range(1, max_order):
        out[..., n + 1] = x * out[..., n] - n * out[..., n - 1]
    return out


def hermite_derivative_table(table):
    """Derivatives from a value table via ``He_n' = n He_{n-1}``."""
    out = np.zeros_like(table)
    n = np.arange(1, table.shape[-1])
    out[..., 1:] = n * table[..., :-1]
    return out


def basis_eval(j, x):
    """Product Hermite basis function ``psi_j`` at a single point."""
    x = np.asarray(x, dtype=float)
    j = np.asarray(j, dtype=int)
    if x.shape[0] < j.shape[0]:
        raise ValueError("point has fewer coordinates than the multi-index")
    return float(np.prod([hermite(int(n), x[d]) for d, n in enumerate(j)]))


def basis_partial(j, x, k):
    """Partial derivative of ``psi_j`` with respect to coordinate ``k`` (0-based)."""
    x = np.asarray(x, dtype=float)
    j = np.asarray(j, dtype=int)
    if k >= j.shape[0] or j[k] == 0:
        return 0.0
    val = 1.0
    for d, n in enumerate(j):
        if d == k:
            val *= n * hermite(int(n) - 1, x[d])
        else:
            val *= hermite(int(n), x[d])
    return float(val)


def _product_columns(table, indices, deriv_table=None, deriv_dim=None):
    """Multiply per-coordinate table lookups into basis columns.

    ``table`` has shape (K, dim, P+1); returns (K, n_terms).
    """
    K = table.shape[0]
    out = np.ones((K, indices.shape[0]))
    dims = set(np.flatnonzero(indices.max(axis=0) > 0).tolist()) if indices.size else set()
    if deriv_dim is not None:
        dims.add(deriv_dim)
    for d in sorted(dims):
        src = deriv_table if d == deriv_dim else table
        out *= src[:, d, indices[:, d]]
    return out


def _check_samples(J, samples):
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if X.shape[1] < J.dim:
        raise ValueError(f"samples have {X.shape[1]} coordinates, index set needs {J.dim}")
    return X[:, :J.dim]


def vandermonde(J, samples):
    """Matrix of basis evaluations, shape ``(K, len(J))``."""
    X = _check_samples(J, samples)
    return _product_columns(hermite_table(X, max(J.max_degree, 1)), J.indices)


def grad_vandermonde(J, samples, diag_coordinate):
    """Matrix of partials with respect to ``diag_coordinate`` (0-based)."""
    X = _check_samples(J, samples)
    if not 0 <= diag_coordinate < J.dim:
        raise ValueError("diag_coordinate outside the index set's inputs")
    table = hermite_table(X, max(J.max_degree, 1))
    return _product_columns(table, J.indices, hermite_derivative_table(table), diag_coordinate)
