"""Interpolants and projections onto the discrete spaces."""

import numpy as np

from .elements import edge_legendre
from .quadrature import EDGE_RULE, TRIANGLE_RULE
from .spaces import FunctionSpace, SpaceError, edge_points_physical, geometry, quadrature_points, quadrature_weights


def lagrange_interpolate(V: FunctionSpace, func):
    """Nodal interpolant of ``func(x, y)`` in a continuous Lagrange space."""
    if V.family != "CG":
        raise SpaceError("nodal interpolation targets a CG space")
    x = V.node_coordinates()
    return V.function(np.asarray(func(x[:, 0], x[:, 1]), dtype=float) * np.ones(V.ndof))


def l2_project_dg(X: FunctionSpace, func, rule=TRIANGLE_RULE):
    """Element-wise L2 projection of ``func(x, y)`` onto a broken space."""
    if X.family != "DG":
        raise SpaceError("L2 projection targets a DG space")
    vals, _ = X.tabulate(rule)
    w = quadrature_weights(X.mesh, rule)
    x = quadrature_points(X.mesh, rule)
    fq = np.asarray(func(x[..., 0], x[..., 1]), dtype=float) * np.ones(w.shape)
    M = np.einsum("tq,tqi,tqj->tij", w, vals, vals)
    b = np.einsum("tq,tqi,tq->ti", w, vals, fq)
    coef = np.linalg.solve(M, b[..., None])[..., 0]
    out = np.empty(X.ndof)
    out[X.cell_dofs] = coef
    return X.function(out)


def rt_interpolate(RT: FunctionSpace, func, rule=EDGE_RULE, cell_rule=TRIANGLE_RULE):
    """Canonical Raviart-Thomas interpolant of a vector field ``func(x, y) -> (vx, vy)``.

    Edge dofs are the Gauss-quadrature moments of the normal component
    against the edge Legendre polynomials; for order 1 the cell dofs are
    ``J^{-1} int_T sigma``.
    """
    if RT.family != "RT":
        raise SpaceError("RT interpolation targets an RT space")
    m = RT.mesh
    p1 = RT.order + 1
    out = np.zeros(RT.ndof)
    edges = np.arange(m.n_edges)
    pts = edge_points_physical(m, edges, rule.points)
    vx, vy = func(pts[..., 0], pts[..., 1])
    n = m.edge_normals()
    flux = np.asarray(vx) * n[:, None, 0] + np.asarray(vy) * n[:, None, 1]
    for j in range(p1):
        out[edges * p1 + j] = flux @ (rule.weights * edge_legendre(j, rule.points))
    if RT.element.n_interior:
        g = geometry(m)
        x = quadrature_points(m, cell_rule)
        w = quadrature_weights(m, cell_rule)
        cx, cy = func(x[..., 0], x[..., 1])
        mean = np.stack([np.sum(w * cx, axis=1), np.sum(w * cy, axis=1)], axis=1)
        interior = np.einsum("tab,tb->ta", g.inv, mean)
        base = m.n_edges * p1
        out[base:] = interior.ravel()
    return RT.function(out)
