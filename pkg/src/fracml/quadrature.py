"""Quadrature rules on the reference triangle and on intervals.

Triangle rules use the reference triangle with vertices (0,0), (1,0), (0,1);
points are returned as (x, y) and weights are normalised to sum to one, so
``area * sum(w * f(points))`` approximates the integral over a physical triangle.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

__all__ = ["triangle_rule", "collapsed_rule", "gauss_interval", "gauss_cube"]


@lru_cache(maxsize=None)
def gauss_interval(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule on [0, 1] with ``n`` points."""
    x, w = roots_legendre(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def collapsed_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Conical product rule with n*n points, exact for degree 2n-1."""
    xj, wj = roots_jacobi(n, 1.0, 0.0)     # weight (1 - t) on [-1, 1]
    u = 0.5 * (xj + 1.0)
    wu = wj / 4.0                          # integral of (1-u) over [0,1] is 1/2
    v, wv = gauss_interval(n)
    U, V = np.meshgrid(u, v, indexing="ij")
    pts = np.column_stack([U.ravel(), ((1.0 - U) * V).ravel()])
    w = (wu[:, None] * wv[None, :]).ravel() * 2.0
    return pts, w


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric rules for degree 1, 2 and 5; collapsed Gauss rules above."""
    if degree <= 1:
        return np.array([[1.0 / 3.0, 1.0 / 3.0]]), np.array([1.0])
    if degree == 2:
        pts = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
        return pts, np.full(3, 1.0 / 3.0)
    if degree <= 5:
        r = np.sqrt(15.0)
        a, b = (6.0 - r) / 21.0, (6.0 + r) / 21.0
        wa, wb = (155.0 - r) / 1200.0, (155.0 + r) / 1200.0
        pts = np.array([[1 / 3, 1 / 3],
                        [a, a], [1 - 2 * a, a], [a, 1 - 2 * a],
                        [b, b], [1 - 2 * b, b], [b, 1 - 2 * b]])
        return pts, np.array([9.0 / 40.0, wa, wa, wa, wb, wb, wb])
    return collapsed_rule((degree + 2) // 2)


@lru_cache(maxsize=None)
def gauss_cube(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Legendre rule on [0,1]^3."""
    x, w = gauss_interval(n)
    X = np.stack(np.meshgrid(x, x, x, indexing="ij"), axis=-1).reshape(-1, 3)
    W = (w[:, None, None] * w[None, :, None] * w[None, None, :]).ravel()
    return X, W
