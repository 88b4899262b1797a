"""Quadrature rules on the reference simplex, in barycentric form."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Points as barycentric coordinates (n_points, dim + 1); weights sum to 1."""

    bary: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def n_points(self) -> int:
        return len(self.weights)


@lru_cache(maxsize=None)
def simplex_rule(dim: int, degree: int) -> QuadratureRule:
    """Smallest tabulated rule exact for polynomials of ``degree`` on a simplex."""
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    if dim == 1:
        n = max(1, (degree + 2) // 2)
        xi, w = np.polynomial.legendre.leggauss(n)
        s = 0.5 * (xi + 1.0)
        bary = np.column_stack([1.0 - s, s])
        return QuadratureRule(bary, 0.5 * w, 2 * n - 1)
    if dim == 2:
        return _triangle_rule(degree)
    raise ValueError(f"unsupported dimension {dim}")


def _triangle_rule(degree: int) -> QuadratureRule:
    if degree <= 1:
        return QuadratureRule(np.full((1, 3), 1.0 / 3.0), np.ones(1), 1)
    if degree == 2:
        bary = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
        return QuadratureRule(bary, np.full(3, 1.0 / 3.0), 2)
    if degree <= 4:
        # Dunavant, 6 points
        a1, w1 = 0.445948490915965, 0.223381589678011
        a2, w2 = 0.091576213509771, 0.109951743655322
        pts, wts = [], []
        for a, w in ((a1, w1), (a2, w2)):
            b = 1.0 - 2.0 * a
            pts += [[a, a, b], [a, b, a], [b, a, a]]
            wts += [w] * 3
        return QuadratureRule(np.array(pts), np.array(wts), 4)
    if degree == 5:
        # Dunavant, 7 points
        r15 = np.sqrt(15.0)
        a1 = (6.0 - r15) / 21.0
        a2 = (6.0 + r15) / 21.0
        w1 = (155.0 - r15) / 1200.0
        w2 = (155.0 + r15) / 1200.0
        pts = [[1 / 3, 1 / 3, 1 / 3]]
        wts = [9.0 / 40.0]
        for a, w in ((a1, w1), (a2, w2)):
            b = 1.0 - 2.0 * a
            pts += [[a, a, b], [a, b, a], [b, a, a]]
            wts += [w] * 3
        return QuadratureRule(np.array(pts), np.array(wts), 5)
    raise ValueError("triangle rules are tabulated up to degree 5")
