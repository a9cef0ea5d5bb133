"""Quadrature rules on reference simplices.

Rules are returned in barycentric form: ``points`` has shape ``(n, d + 1)``
and ``weights`` sum to one, so an integral over a simplex ``K`` is
``vol(K) * sum(w * f(x(b)))``.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre


@lru_cache(maxsize=None)
def _simplex_rule(dim: int, degree: int):
    if dim == 0:
        return np.ones((1, 1)), np.ones(1)
    n = max(1, (degree + 2) // 2)  # 2n - 1 >= degree
    # conical product (Stroud): direction i carries weight (1 - xi)^(dim - 1 - i)
    nodes, weights = [], []
    for i in range(dim):
        a = dim - 1 - i
        if a == 0:
            x, w = roots_legendre(n)
        else:
            x, w = roots_jacobi(n, a, 0.0)
        nodes.append((1.0 + x) / 2.0)
        weights.append(w / 2.0 ** (a + 1))
    grids = np.meshgrid(*nodes, indexing="ij")
    wgrids = np.meshgrid(*weights, indexing="ij")
    xi = np.stack([g.ravel() for g in grids], axis=1)
    w = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    # collapse the cube onto the unit simplex
    pts = np.empty_like(xi)
    scale = np.ones(len(xi))
    for i in range(dim):
        pts[:, i] = xi[:, i] * scale
        scale = scale * (1.0 - xi[:, i])
    bary = np.column_stack([1.0 - pts.sum(axis=1), pts])
    w = w / w.sum()
    bary.setflags(write=False)
    w.setflags(write=False)
    return bary, w


def simplex_rule(dim: int, degree: int):
    """Positive-weight rule exact for polynomials of total ``degree`` on a ``dim``-simplex."""
    if dim < 0 or degree < 0:
        raise ValueError("dim and degree must be nonnegative")
    return _simplex_rule(int(dim), int(degree))


def gauss_interval(npts: int):
    """Gauss-Legendre nodes on (0, 1) with weights summing to one."""
    x, w = roots_legendre(npts)
    return (1.0 + x) / 2.0, w / 2.0
