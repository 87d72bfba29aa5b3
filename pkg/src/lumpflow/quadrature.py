"""Quadrature rules on simplices and intervals.

Simplex rules are returned in barycentric coordinates with weights that sum
to one, so ``sum(w * f(x)) * |K|`` approximates the element integral.
"""

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def simplex_rule(dim, degree=2):
    """Barycentric points ``(q, dim+1)`` and normalized weights ``(q,)``.

    ``degree=2`` gives the fixed low-order rules (3 points on triangles,
    4 on tetrahedra). Higher degrees use collapsed Gauss-Legendre products.
    """
    if degree <= 2:
        if dim == 1:
            a = 0.5 - 0.5 / np.sqrt(3.0)
            bary = np.array([[1 - a, a], [a, 1 - a]])
            return bary, np.full(2, 0.5)
        if dim == 2:
            bary = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
            return bary, np.full(3, 1 / 3)
        if dim == 3:
            a, b = 0.5854101966249685, 0.1381966011250105
            bary = np.full((4, 4), b)
            np.fill_diagonal(bary, a)
            return bary, np.full(4, 0.25)
        raise ValueError(f"unsupported dimension {dim}")
    n = degree // 2 + 2
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    if dim == 1:
        return np.column_stack([1 - x, x]), w
    if dim == 2:
        u, v = np.meshgrid(x, x, indexing="ij")
        wu, wv = np.meshgrid(w, w, indexing="ij")
        px = u.ravel()
        py = ((1 - u) * v).ravel()
        weights = (wu * wv * (1 - u)).ravel() * 2.0
        return np.column_stack([1 - px - py, px, py]), weights
    if dim == 3:
        u, v, s = np.meshgrid(x, x, x, indexing="ij")
        wu, wv, ws = np.meshgrid(w, w, w, indexing="ij")
        px = u.ravel()
        py = ((1 - u) * v).ravel()
        pz = ((1 - u) * (1 - v) * s).ravel()
        weights = (wu * wv * ws * (1 - u) ** 2 * (1 - v)).ravel() * 6.0
        return np.column_stack([1 - px - py - pz, px, py, pz]), weights
    raise ValueError(f"unsupported dimension {dim}")


def gauss_interval(a, b, npoints=3):
    """Gauss-Legendre nodes and weights on ``[a, b]`` (weights sum to ``b - a``)."""
    x, w = np.polynomial.legendre.leggauss(npoints)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w
