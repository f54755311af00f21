"""Assembly of the bilinear and linear forms of the primal-dual mixed system."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .. import _accel
from ..mesh import mesh_size
from ..solver import SaddleSystem
from .elements import edge_legendre
from .quadrature import EDGE_RULE, TRIANGLE_RULE
from .spaces import (FunctionSpace, SpaceError, coefficient_qp, edge_local_index, function_qp,
                     quadrature_weights)


class AssemblyError(ValueError):
    pass


def _scatter(rows, cols, K, shape):
    r = np.broadcast_to(rows[:, :, None], K.shape).ravel()
    c = np.broadcast_to(cols[:, None, :], K.shape).ravel()
    return sp.coo_matrix((K.ravel(), (r, c)), shape=shape).tocsr()


def _as_vec(a):
    return a[..., None] if a.ndim == 3 else a


def bilinear(test: FunctionSpace, trial: FunctionSpace, test_data, trial_data, weight):
    """Sparse matrix of ``sum_T int weight * test_data . trial_data`` (rows = test dofs)."""
    K = _accel.element_bilinear(weight, _as_vec(test_data), _as_vec(trial_data))
    return _scatter(test.cell_dofs, trial.cell_dofs, K, (test.ndof, trial.ndof))


def _sym(A):
    return ((A + A.T) * 0.5).tocsr()


def mass_matrix(V, coef=1.0, rule=TRIANGLE_RULE):
    vals, _ = V.tabulate(rule)
    w = quadrature_weights(V.mesh, rule) * np.broadcast_to(coef, (V.mesh.n_triangles, len(rule.weights)))
    return _sym(bilinear(V, V, vals, vals, w))


def stiffness_matrix(V, coef=1.0, rule=TRIANGLE_RULE):
    _, grads = V.tabulate(rule)
    w = quadrature_weights(V.mesh, rule) * np.broadcast_to(coef, (V.mesh.n_triangles, len(rule.weights)))
    return _sym(bilinear(V, V, grads, grads, w))


def gradient_flux_matrix(V, RT, rule=TRIANGLE_RULE):
    """Rows V, columns RT: ``-(tau, grad v)``."""
    _, grads = V.tabulate(rule)
    vals, _ = RT.tabulate(rule)
    return -bilinear(V, RT, grads, vals, quadrature_weights(V.mesh, rule))


def divergence_matrix(X, RT, rule=TRIANGLE_RULE):
    """Rows X, columns RT: ``-(div tau, y)``."""
    yv, _ = X.tabulate(rule)
    _, divs = RT.tabulate(rule)
    return -bilinear(X, RT, yv, divs, quadrature_weights(X.mesh, rule))


def boundary_flux_matrix(RT, edges=None, weight=1.0, rule=EDGE_RULE):
    """``weight * (sigma.n, tau.n)`` over the given boundary edges (default: all)."""
    m = RT.mesh
    edges = m.boundary_edges if edges is None else np.asarray(edges, dtype=np.int64)
    if len(edges) == 0:
        return sp.csr_matrix((RT.ndof, RT.ndof))
    cells, loc = edge_local_index(m, edges)
    vals, _ = RT.tabulate_edges(cells, loc, rule.points)
    n = m.edge_normals()[edges]
    vn = np.einsum("eqkc,ec->eqk", vals, n)[..., None]
    w = weight * m.edge_lengths()[edges][:, None] * rule.weights[None, :]
    K = _accel.element_bilinear(w, vn, vn)
    rows = RT.cell_dofs[cells]
    return _sym(_scatter(rows, rows, K, (RT.ndof, RT.ndof)))


def load_vector(V, f_qp, weight=None, rule=TRIANGLE_RULE):
    """``(f, v)`` with ``f`` given at quadrature points (scalar (nt, nq) or vector (nt, nq, 2))."""
    vals, _ = V.tabulate(rule)
    w = quadrature_weights(V.mesh, rule)
    if weight is not None:
        w = w * weight
    f_qp = f_qp[..., None] if f_qp.ndim == 2 else f_qp
    Fe = _accel.element_linear(w, _as_vec(vals), f_qp)
    return np.bincount(V.cell_dofs.ravel(), weights=Fe.ravel(), minlength=V.ndof)


@dataclass(eq=False)
class FluxBC:
    """Prescribed outward flux ``psi`` on boundary edges, sampled at the edge Gauss points.

    ``psi`` has shape (len(edges), n_edge_points), points ordered along the
    global edge orientation (low to high vertex).
    """

    edges: np.ndarray
    psi: np.ndarray


def flux_moments(RT, bc: FluxBC, rule=EDGE_RULE):
    """RT dof indices and values reproducing the edge moments of ``psi``."""
    m = RT.mesh
    edges = np.asarray(bc.edges, dtype=np.int64)
    b_pos = np.searchsorted(m.boundary_edges, edges)
    if np.any(b_pos >= len(m.boundary_edges)) or np.any(m.boundary_edges[np.minimum(b_pos, len(m.boundary_edges) - 1)] != edges):
        raise AssemblyError("flux data given on a non-boundary edge")
    out = m.boundary_outward_sign()[b_pos]
    psi = np.asarray(bc.psi, dtype=float) * out[:, None]  # component along the global normal
    p1 = RT.order + 1
    dofs = np.empty((len(edges), p1), dtype=np.int64)
    vals = np.empty((len(edges), p1))
    for j in range(p1):
        dofs[:, j] = edges * p1 + j
        vals[:, j] = psi @ (rule.weights * edge_legendre(j, rule.points))
    return dofs.ravel(), vals.ravel()


def saddle_spaces(mesh, k):
    if k not in (1, 2):
        raise SpaceError(f"polynomial order k={k} not supported (k in {{1, 2}})")
    return FunctionSpace(mesh, "CG", k), FunctionSpace(mesh, "RT", k - 1), FunctionSpace(mesh, "DG", k - 1)


def assemble_saddle(mesh, gamma, alpha, beta, q=None, f=None, k=1, omega="omega", flux_bc=None,
                    gamma_min=None, data_scaling="alpha", spaces=None):
    """Assemble the compact primal-dual system.

    ``gamma``: scalar, callable, or coefficient field; ``q``, ``f``: callables,
    scalars or arrays at the triangle quadrature points.  ``data_scaling``
    ``'alpha'`` puts ``alpha (q, v)_omega`` in the u-block, ``'literal'`` uses
    ``(q, v)_omega``.
    """
    return assemble_saddle_multi(mesh, gamma, alpha, beta, [(q, f, flux_bc)], k, omega, gamma_min,
                                 data_scaling, spaces)[0]


def assemble_saddle_multi(mesh, gamma, alpha, beta, data, k=1, omega="omega", gamma_min=None,
                          data_scaling="alpha", spaces=None):
    """One system per ``(q, f, flux_bc)`` triple in ``data``, all sharing the same matrix.

    Systems whose constrained dofs coincide share the reduced matrix object too.
    """
    if alpha <= 0:
        raise AssemblyError(f"alpha must be positive, got {alpha}")
    if beta < 0:
        raise AssemblyError(f"beta must be non-negative, got {beta}")
    if data_scaling not in ("alpha", "literal"):
        raise AssemblyError(f"unknown data scaling {data_scaling!r}")
    V, RT, X = spaces if spaces is not None else saddle_spaces(mesh, k)
    if V.mesh is not mesh:
        raise AssemblyError("spaces were built on a different mesh")
    gq = coefficient_qp(mesh, gamma)
    floor = gamma_min if gamma_min is not None else getattr(gamma, "floor", 0.0)
    if gq.min() <= 0 or gq.min() < floor * (1.0 - 1e-12):
        raise AssemblyError(f"diffusivity below floor: min {gq.min():.4g} (floor {floor:.4g})")

    w_omega = mesh.region_mask(omega).astype(float)[:, None]
    Auu = _sym(stiffness_matrix(V, gq) + mass_matrix(V, alpha * w_omega))
    Aus = gradient_flux_matrix(V, RT)
    Ass = mass_matrix(RT, 1.0 / gq)
    if beta > 0:
        Ass = _sym(Ass + boundary_flux_matrix(RT, weight=beta))
    B = divergence_matrix(X, RT)
    A = sp.bmat([[Auu, Aus, None], [Aus.T, Ass, B.T], [None, B, None]], format="csr")

    sizes = (V.ndof, RT.ndof, X.ndof)
    n = sum(sizes)
    scale = alpha if data_scaling == "alpha" else 1.0
    reduced = {}
    out = []
    for q, f, flux_bc in data:
        bu = load_vector(V, function_qp(mesh, q), weight=scale * w_omega)
        bz = load_vector(X, function_qp(mesh, f))
        b = np.concatenate([bu, np.zeros(RT.ndof), bz])
        if flux_bc is None or len(flux_bc.edges) == 0:
            out.append(SaddleSystem(A, b, sizes, np.arange(n, dtype=np.int64)))
            continue
        dofs, vals = flux_moments(RT, flux_bc)
        fixed = V.ndof + dofs
        order = np.argsort(fixed)
        fixed, vals = fixed[order], vals[order]
        key = fixed.tobytes()
        if key not in reduced:
            free = np.setdiff1d(np.arange(n, dtype=np.int64), fixed)
            Af = A[free]
            reduced[key] = (free, Af[:, free].tocsr(), Af[:, fixed].tocsr())
        free, Aff, Afx = reduced[key]
        out.append(SaddleSystem(Aff, b[free] - Afx @ vals, sizes, free, fixed, vals))
    return out


def assemble_gradient_smoother(mesh, order=1, h=None):
    """``(g, v) + (h grad g, grad v)`` on continuous P_order; h defaults to the mesh size."""
    V = FunctionSpace(mesh, "CG", order)
    h = mesh_size(mesh) if h is None else h
    return _sym(mass_matrix(V) + stiffness_matrix(V, h)), V


def to_coo_text(A, path):
    """Dump a sparse matrix as ``i j value`` lines."""
    C = sp.coo_matrix(A)
    with open(path, "w") as fh:
        for i, j, v in zip(C.row.tolist(), C.col.tolist(), C.data.tolist()):
            fh.write(f"{i} {j} {v!r}\n")
