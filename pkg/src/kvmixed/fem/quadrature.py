"""Quadrature on the reference triangle and the unit interval."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class QuadRule:
    points: np.ndarray  # (nq, 2) reference coordinates, or (nq,) on [0, 1]
    weights: np.ndarray  # (nq,)
    degree: int


def gauss_interval(n=5):
    """n-point Gauss-Legendre rule on [0, 1]; exact to degree 2n - 1."""
    x, w = np.polynomial.legendre.leggauss(n)
    return QuadRule(0.5 * (x + 1.0), 0.5 * w, 2 * n - 1)


def collapsed_triangle(n=4):
    """Duffy-collapsed tensor Gauss rule on the reference triangle (0,0), (1,0), (0,1).

    Exact for polynomials of total degree <= 2n - 1; weights sum to 1/2.
    """
    g = gauss_interval(n)
    xi, eta = np.meshgrid(g.points, g.points, indexing="ij")
    wxi, weta = np.meshgrid(g.weights, g.weights, indexing="ij")
    x = xi * (1.0 - eta)
    y = eta
    w = wxi * weta * (1.0 - eta)
    return QuadRule(np.stack([x.ravel(), y.ravel()], axis=1), w.ravel(), 2 * n - 1)


TRIANGLE_RULE = collapsed_triangle(4)
EDGE_RULE = gauss_interval(5)
