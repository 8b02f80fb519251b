"""Nodal Lagrange basis on the reference triangle and quadrature rules.

The reference triangle has vertices (0, 0), (1, 0), (0, 1). Nodes are the
lattice points ``(i/k, j/k)``, ``i + j <= k``, ordered row by row in ``j``.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss


def gauss_interval(n: int):
    """``n``-point Gauss-Legendre rule on [0, 1] (exact to degree ``2n - 1``)."""
    x, w = leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def triangle_rule(degree: int):
    """Collapsed Gauss rule on the reference triangle, exact to ``degree``.

    Weights sum to the reference area 1/2.
    """
    n = max(1, (degree + 3) // 2)
    t, w = gauss_interval(n)
    xi, eta = np.meshgrid(t, t, indexing="ij")
    wx, wy = np.meshgrid(w, w, indexing="ij")
    pts = np.column_stack([xi.ravel(), ((1.0 - xi) * eta).ravel()])
    wts = (wx * wy * (1.0 - xi)).ravel()
    return pts, wts


def edge_rule(k: int):
    """Gauss rule on [0, 1] exact for degree ``2k + 1``."""
    return gauss_interval(k + 1)


def _exponents(k):
    return [(a, d - a) for d in range(k + 1) for a in range(d, -1, -1)]


class LagrangeTriangle:
    """Degree-``k`` nodal basis on the reference triangle."""

    def __init__(self, k: int):
        if k < 1:
            raise ValueError("polynomial degree must be >= 1")
        self.k = k
        self.nodes = np.array([(i / k, j / k) for j in range(k + 1) for i in range(k + 1 - j)])
        self.exponents = np.array(_exponents(k))
        self.dim = len(self.nodes)
        V = self._monomials(self.nodes)
        self.coeffs = np.linalg.solve(V, np.eye(self.dim))

    def _monomials(self, pts):
        x = np.asarray(pts)[..., 0, None]
        y = np.asarray(pts)[..., 1, None]
        a, b = self.exponents[:, 0], self.exponents[:, 1]
        return x ** a * y ** b

    def _monomial_grads(self, pts):
        x = np.asarray(pts)[..., 0, None]
        y = np.asarray(pts)[..., 1, None]
        a, b = self.exponents[:, 0], self.exponents[:, 1]
        dx = a * x ** np.maximum(a - 1, 0) * y ** b
        dy = b * x ** a * y ** np.maximum(b - 1, 0)
        return np.stack([dx, dy], axis=-1)

    def values(self, pts) -> np.ndarray:
        """Basis values, shape ``pts.shape[:-1] + (dim,)``."""
        return self._monomials(pts) @ self.coeffs

    def gradients(self, pts) -> np.ndarray:
        """Reference gradients, shape ``pts.shape[:-1] + (dim, 2)``."""
        g = self._monomial_grads(pts)
        return np.einsum("...md,mj->...jd", g, self.coeffs)


class LagrangeEdge:
    """Degree-``k`` nodal trace basis on [0, 1] with equispaced nodes."""

    def __init__(self, k: int):
        self.k = k
        self.nodes = np.linspace(0.0, 1.0, k + 1)
        self.dim = k + 1

    def values(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)[..., None]
        out = np.ones(t.shape[:-1] + (self.dim,))
        for j, tj in enumerate(self.nodes):
            for m, tm in enumerate(self.nodes):
                if m != j:
                    out[..., j] *= (t[..., 0] - tm) / (tj - tm)
        return out

    def mass(self) -> np.ndarray:
        """Mass matrix on the unit interval; scale by the edge length."""
        t, w = gauss_interval(self.k + 1)
        phi = self.values(t)
        return phi.T @ (w[:, None] * phi)
