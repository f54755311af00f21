"""Reference-element bases on the triangle (0,0), (1,0), (0,1).

Local edge ``i`` is opposite vertex ``i`` and runs from vertex ``i+1`` to
vertex ``i+2`` (mod 3).  Raviart-Thomas degrees of freedom are, per edge,
moments of the normal component against orthonormal Legendre polynomials
in the edge parameter, followed (for order 1) by the two mean components
over the cell.
"""

import numpy as np

from .quadrature import EDGE_RULE, TRIANGLE_RULE

REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def edge_points(i, t):
    """Reference coordinates of parameter values ``t`` on local edge ``i``."""
    a = REF_VERTICES[(i + 1) % 3]
    b = REF_VERTICES[(i + 2) % 3]
    t = np.asarray(t, dtype=float)
    return a + t[..., None] * (b - a)


def edge_legendre(j, t):
    if j == 0:
        return np.ones_like(t)
    if j == 1:
        return np.sqrt(3.0) * (2.0 * t - 1.0)
    raise ValueError(f"edge moment order {j} not supported")


def _bary(p):
    p = np.asarray(p, dtype=float)
    x, y = p[..., 0], p[..., 1]
    return np.stack([1.0 - x - y, x, y], axis=-1)


class Lagrange:
    """Continuous (``family='CG'``) or broken (``'DG'``) nodal Lagrange basis, order 0..2."""

    def __init__(self, order):
        if order not in (0, 1, 2):
            raise ValueError(f"Lagrange order {order} not supported")
        self.order = order
        self.nloc = {0: 1, 1: 3, 2: 6}[order]

    def values(self, p):
        lam = _bary(p)
        if self.order == 0:
            return np.ones(lam.shape[:-1] + (1,))
        if self.order == 1:
            return lam
        l0, l1, l2 = lam[..., 0], lam[..., 1], lam[..., 2]
        return np.stack([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
                         4 * l1 * l2, 4 * l2 * l0, 4 * l0 * l1], axis=-1)

    def grads(self, p):
        lam = _bary(p)
        shape = lam.shape[:-1]
        if self.order == 0:
            return np.zeros(shape + (1, 2))
        dl = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        if self.order == 1:
            return np.broadcast_to(dl, shape + (3, 2)).copy()
        g = np.empty(shape + (6, 2))
        for i in range(3):
            g[..., i, :] = (4 * lam[..., i] - 1)[..., None] * dl[i]
        for i in range(3):
            a, b = (i + 1) % 3, (i + 2) % 3
            g[..., 3 + i, :] = 4 * (lam[..., a][..., None] * dl[b] + lam[..., b][..., None] * dl[a])
        return g

    def nodes(self):
        """Reference coordinates of the nodal points."""
        if self.order == 0:
            return np.array([[1.0 / 3.0, 1.0 / 3.0]])
        if self.order == 1:
            return REF_VERTICES.copy()
        mids = np.array([edge_points(i, 0.5) for i in range(3)])
        return np.concatenate([REF_VERTICES, mids])


# prime basis of RT_p on the reference cell: (value fn, divergence fn)
def _rt_prime(order):
    one = lambda x, y: np.ones_like(x)  # noqa: E731
    zero = lambda x, y: np.zeros_like(x)  # noqa: E731
    if order == 0:
        return [
            (lambda x, y: (one(x, y), zero(x, y)), zero),
            (lambda x, y: (zero(x, y), one(x, y)), zero),
            (lambda x, y: (x, y), lambda x, y: 2.0 * one(x, y)),
        ]
    if order == 1:
        return [
            (lambda x, y: (one(x, y), zero(x, y)), zero),
            (lambda x, y: (x, zero(x, y)), one),
            (lambda x, y: (y, zero(x, y)), zero),
            (lambda x, y: (zero(x, y), one(x, y)), zero),
            (lambda x, y: (zero(x, y), x), zero),
            (lambda x, y: (zero(x, y), y), one),
            (lambda x, y: (x * x, x * y), lambda x, y: 3.0 * x),
            (lambda x, y: (x * y, y * y), lambda x, y: 3.0 * y),
        ]
    raise ValueError(f"Raviart-Thomas order {order} not supported")


class RaviartThomas:
    """RT_p reference basis (p = 0, 1) dual to edge/interior moments."""

    def __init__(self, order):
        self.order = order
        self.prime = _rt_prime(order)
        self.n_edge = order + 1
        self.n_interior = 2 if order == 1 else 0
        self.nloc = 3 * self.n_edge + self.n_interior
        self.coeffs = np.linalg.inv(self._dual_matrix())

    def _functionals(self, vals_fn):
        """Apply every reference functional to a vector field ``vals_fn(x, y) -> (vx, vy)``."""
        out = []
        for i in range(3):
            a = REF_VERTICES[(i + 1) % 3]
            b = REF_VERTICES[(i + 2) % 3]
            d = b - a
            n = np.array([d[1], -d[0]])  # outward normal scaled by edge length
            pts = edge_points(i, EDGE_RULE.points)
            vx, vy = vals_fn(pts[:, 0], pts[:, 1])
            flux = vx * n[0] + vy * n[1]
            for j in range(self.n_edge):
                out.append(np.sum(EDGE_RULE.weights * flux * edge_legendre(j, EDGE_RULE.points)))
        if self.n_interior:
            pts = TRIANGLE_RULE.points
            vx, vy = vals_fn(pts[:, 0], pts[:, 1])
            out.append(np.sum(TRIANGLE_RULE.weights * vx))
            out.append(np.sum(TRIANGLE_RULE.weights * vy))
        return np.array(out)

    def _dual_matrix(self):
        return np.stack([self._functionals(f) for f, _ in self.prime], axis=1)

    def values(self, p):
        p = np.asarray(p, dtype=float)
        x, y = p[..., 0], p[..., 1]
        prime = np.stack([np.stack(f(x, y), axis=-1) for f, _ in self.prime], axis=-2)  # (..., m, 2)
        return np.einsum("...mc,mk->...kc", prime, self.coeffs)

    def divs(self, p):
        p = np.asarray(p, dtype=float)
        x, y = p[..., 0], p[..., 1]
        prime = np.stack([d(x, y) for _, d in self.prime], axis=-1)
        return prime @ self.coeffs
