"""Function spaces, degree-of-freedom maps and finite element functions."""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np

from ..mesh import PointLocator, TriMesh
from .elements import Lagrange, RaviartThomas, edge_points
from .quadrature import EDGE_RULE, TRIANGLE_RULE

SUPPORTED = {"CG": (1, 2), "DG": (0, 1), "RT": (0, 1)}

_geometry_cache: "weakref.WeakKeyDictionary[TriMesh, Geometry]" = weakref.WeakKeyDictionary()
_locator_cache: "weakref.WeakKeyDictionary[TriMesh, PointLocator]" = weakref.WeakKeyDictionary()


class SpaceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Geometry:
    origin: np.ndarray  # (nt, 2)
    jac: np.ndarray  # (nt, 2, 2), columns v1 - v0, v2 - v0
    det: np.ndarray  # (nt,)
    inv: np.ndarray  # (nt, 2, 2)

    def map(self, ref):
        """Reference points (nq, 2) or per-cell (nt, nq, 2) to physical (nt, nq, 2)."""
        if ref.ndim == 2:
            return self.origin[:, None, :] + np.einsum("tab,qb->tqa", self.jac, ref)
        return self.origin[:, None, :] + np.einsum("tab,tqb->tqa", self.jac, ref)


def geometry(mesh: TriMesh) -> Geometry:
    g = _geometry_cache.get(mesh)
    if g is None:
        c = mesh.corners()
        jac = np.stack([c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]], axis=2)
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        inv = np.empty_like(jac)
        inv[:, 0, 0] = jac[:, 1, 1] / det
        inv[:, 1, 1] = jac[:, 0, 0] / det
        inv[:, 0, 1] = -jac[:, 0, 1] / det
        inv[:, 1, 0] = -jac[:, 1, 0] / det
        g = Geometry(c[:, 0].copy(), jac, det, inv)
        _geometry_cache[mesh] = g
    return g


def locator(mesh: TriMesh) -> PointLocator:
    loc = _locator_cache.get(mesh)
    if loc is None:
        loc = PointLocator(mesh)
        _locator_cache[mesh] = loc
    return loc


def quadrature_points(mesh, rule=TRIANGLE_RULE):
    return geometry(mesh).map(rule.points)


def quadrature_weights(mesh, rule=TRIANGLE_RULE):
    """Physical weights ``w_q |det J_t|``, shape (nt, nq)."""
    return geometry(mesh).det[:, None] * rule.weights[None, :]


class FunctionSpace:
    """A finite element space on a mesh.

    ``family`` is ``'CG'`` (continuous Lagrange, V_k), ``'DG'`` (broken
    polynomials, X_p) or ``'RT'`` (Raviart-Thomas).
    """

    def __init__(self, mesh: TriMesh, family: str, order: int):
        if family not in SUPPORTED:
            raise SpaceError(f"unknown family {family!r}")
        if order not in SUPPORTED[family]:
            raise SpaceError(f"{family} order {order} not supported (allowed: {SUPPORTED[family]})")
        self.mesh = mesh
        self.family = family
        self.order = order
        self.element = RaviartThomas(order) if family == "RT" else Lagrange(order)
        self.nloc = self.element.nloc
        self._build_dofmap()
        self._tab_cache = {}

    def __repr__(self):
        return f"FunctionSpace({self.family}{self.order}, ndof={self.ndof})"

    @property
    def is_vector(self):
        return self.family == "RT"

    def _build_dofmap(self):
        m = self.mesh
        nt = m.n_triangles
        scale = np.ones((nt, self.nloc))
        if self.family == "CG":
            if self.order == 1:
                dofs = m.triangles.copy()
            else:
                dofs = np.concatenate([m.triangles, m.n_vertices + m.tri_edges], axis=1)
            ndof = m.n_vertices + (m.n_edges if self.order == 2 else 0)
        elif self.family == "DG":
            dofs = np.arange(nt * self.nloc, dtype=np.int64).reshape(nt, self.nloc)
            ndof = nt * self.nloc
        else:
            ne_dof = self.order + 1
            lens = m.edge_lengths()[m.tri_edges]  # (nt, 3)
            cols = []
            for i in range(3):
                for j in range(ne_dof):
                    cols.append(m.tri_edges[:, i] * ne_dof + j)
                    scale[:, i * ne_dof + j] = lens[:, i] * (m.tri_edge_signs[:, i] if j % 2 == 0 else 1.0)
            base = m.n_edges * ne_dof
            for d in range(self.element.n_interior):
                cols.append(base + np.arange(nt) * self.element.n_interior + d)
            dofs = np.stack(cols, axis=1)
            ndof = base + nt * self.element.n_interior
        self.cell_dofs = dofs.astype(np.int64)
        self.cell_scale = scale
        self.ndof = int(ndof)

    # -- nodal data (CG / DG) ---------------------------------------------
    def node_coordinates(self):
        if self.family == "RT":
            raise SpaceError("RT space has no nodal points")
        m = self.mesh
        if self.family == "CG":
            if self.order == 1:
                return m.vertices.copy()
            return np.concatenate([m.vertices, m.edge_midpoints()])
        return geometry(m).map(self.element.nodes()).reshape(-1, 2)

    def boundary_dofs(self):
        if self.family != "CG":
            raise SpaceError("boundary dofs are defined for continuous spaces only")
        m = self.mesh
        b = m.boundary_edges
        d = np.unique(m.edges[b].ravel())
        if self.order == 2:
            d = np.concatenate([d, m.n_vertices + b])
        return np.sort(d)

    # -- tabulation -----------------------------------------------------------
    def tabulate_local(self, cells, ref):
        """Physical basis data at reference points.

        ``ref`` is (nq, 2) shared by all ``cells`` or (n, nq, 2) per cell.
        Returns ``(values, derivs)``: values (n, nq, nloc) or (n, nq, nloc, 2);
        derivs are gradients (n, nq, nloc, 2) for scalar spaces, divergences
        (n, nq, nloc) for RT.
        """
        cells = np.asarray(cells, dtype=np.int64)
        g = geometry(self.mesh)
        n = len(cells)
        shared = ref.ndim == 2
        el = self.element
        if self.family == "RT":
            hv = el.values(ref)  # (nq, nloc, 2) or (n, nq, nloc, 2)
            hd = el.divs(ref)
            fac = self.cell_scale[cells] / g.det[cells][:, None]  # (n, nloc)
            jac = g.jac[cells]
            if shared:
                vals = np.einsum("tab,qkb->tqka", jac, hv)
                divs = np.broadcast_to(hd[None], (n,) + hd.shape)
            else:
                vals = np.einsum("tab,tqkb->tqka", jac, hv)
                divs = hd
            vals = vals * fac[:, None, :, None]
            divs = divs * fac[:, None, :]
            return vals, divs
        hv = el.values(ref)
        hg = el.grads(ref)
        inv = g.inv[cells]
        if shared:
            vals = np.broadcast_to(hv[None], (n,) + hv.shape)
            grads = np.einsum("tba,qkb->tqka", inv, hg)
        else:
            vals = hv
            grads = np.einsum("tba,tqkb->tqka", inv, hg)
        return vals, grads

    def tabulate(self, rule=TRIANGLE_RULE):
        key = id(rule)
        if key not in self._tab_cache:
            self._tab_cache[key] = self.tabulate_local(np.arange(self.mesh.n_triangles), rule.points)
        return self._tab_cache[key]

    def tabulate_edges(self, cells, local_edges, t, signs=None):
        """Basis data at edge parameters ``t`` (global orientation) on ``(cell, local edge)`` pairs."""
        cells = np.asarray(cells, dtype=np.int64)
        local_edges = np.asarray(local_edges, dtype=np.int64)
        if signs is None:
            signs = self.mesh.tri_edge_signs[cells, local_edges]
        t_loc = np.where(np.asarray(signs)[:, None] > 0, t[None, :], 1.0 - t[None, :])
        ref = np.empty(t_loc.shape + (2,))
        for i in range(3):
            sel = local_edges == i
            if np.any(sel):
                ref[sel] = edge_points(i, t_loc[sel])
        return self.tabulate_local(cells, ref)

    def function(self, coef=None):
        return FeFunction(self, np.zeros(self.ndof) if coef is None else coef)


def edge_points_physical(mesh, edges, t=EDGE_RULE.points):
    """Points along global edges at parameters ``t`` from low to high vertex, (ne, nt, 2)."""
    a = mesh.vertices[mesh.edges[edges, 0]]
    b = mesh.vertices[mesh.edges[edges, 1]]
    return a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]


def edge_local_index(mesh, edges, side=0):
    """(cell, local edge index) of each global edge on the given side (0 or 1)."""
    cells = mesh.edge_triangles[edges, side]
    loc = np.argmax(mesh.tri_edges[cells] == np.asarray(edges)[:, None], axis=1)
    return cells, loc


class FeFunction:
    """Coefficient vector over a :class:`FunctionSpace`."""

    def __init__(self, space: FunctionSpace, coef):
        coef = np.asarray(coef, dtype=float)
        if coef.shape != (space.ndof,):
            raise SpaceError(f"coefficient length {coef.shape} does not match {space.ndof} dofs")
        self.space = space
        self.coef = coef

    def __repr__(self):
        return f"FeFunction({self.space!r})"

    @property
    def mesh(self):
        return self.space.mesh

    def local(self, cells=None):
        d = self.space.cell_dofs if cells is None else self.space.cell_dofs[cells]
        return self.coef[d]

    def _combine(self, data, loc):
        if data.ndim == 4:
            return np.einsum("tqkc,tk->tqc", data, loc)
        return np.einsum("tqk,tk->tq", data, loc)

    def values_qp(self, rule=TRIANGLE_RULE):
        vals, _ = self.space.tabulate(rule)
        return self._combine(vals, self.local())

    def derivs_qp(self, rule=TRIANGLE_RULE):
        """Gradient (scalar spaces) or divergence (RT) at quadrature points."""
        _, der = self.space.tabulate(rule)
        return self._combine(der, self.local())

    def _at(self, points):
        points = np.asarray(points, dtype=float)
        shape = points.shape[:-1]
        flat = points.reshape(-1, 2)
        cells, bary, _ = locator(self.mesh).locate(flat)
        ref = bary[:, None, 1:3]
        vals, der = self.space.tabulate_local(cells, ref)
        loc = self.local(cells)
        return shape, self._combine(vals, loc)[:, 0], self._combine(der, loc)[:, 0]

    def __call__(self, points):
        """Evaluate at arbitrary points (located in the mesh; nearby outside points extrapolate)."""
        shape, v, _ = self._at(points)
        return v.reshape(shape + v.shape[1:])

    def derivs(self, points):
        shape, _, d = self._at(points)
        return d.reshape(shape + d.shape[1:])

    def on_edges(self, edges, t=EDGE_RULE.points, side=0):
        """Values (and derivatives) at edge points seen from the given side."""
        cells, loc = edge_local_index(self.mesh, edges, side)
        vals, der = self.space.tabulate_edges(cells, loc, t)
        c = self.local(cells)
        return self._combine(vals, c), self._combine(der, c)


class CoefficientField:
    """Diffusivity in a continuous Lagrange space with a positivity floor."""

    def __init__(self, function: FeFunction, floor=0.1):
        if function.space.family != "CG":
            raise SpaceError("coefficient fields live in continuous Lagrange spaces")
        self.function = function
        self.floor = float(floor)

    @classmethod
    def constant(cls, mesh, value=1.0, order=1, floor=0.1):
        V = FunctionSpace(mesh, "CG", order)
        return cls(V.function(np.full(V.ndof, float(value))), floor)

    @classmethod
    def interpolate(cls, mesh, func, order=1, floor=0.1):
        V = FunctionSpace(mesh, "CG", order)
        x = V.node_coordinates()
        return cls(V.function(np.asarray(func(x[:, 0], x[:, 1]), dtype=float) * np.ones(V.ndof)), floor)

    @property
    def nodal(self):
        return self.function.coef

    @property
    def space(self):
        return self.function.space

    def with_nodal(self, values):
        return CoefficientField(self.space.function(np.asarray(values, dtype=float)), self.floor)

    def min(self):
        return float(self.nodal.min())

    def check(self):
        if self.min() < self.floor:
            raise SpaceError(f"coefficient below floor: min {self.min():.4g} < {self.floor:.4g}")

    def values_qp(self, rule=TRIANGLE_RULE):
        return self.function.values_qp(rule)

    def grads_qp(self, rule=TRIANGLE_RULE):
        return self.function.derivs_qp(rule)


def coefficient_qp(mesh, gamma, rule=TRIANGLE_RULE):
    """Coefficient values at quadrature points from a scalar, callable or field."""
    if isinstance(gamma, CoefficientField):
        if gamma.space.mesh is not mesh:
            raise SpaceError("coefficient field lives on a different mesh")
        return gamma.values_qp(rule)
    if isinstance(gamma, FeFunction):
        return gamma.values_qp(rule)
    if callable(gamma):
        x = quadrature_points(mesh, rule)
        return np.asarray(gamma(x[..., 0], x[..., 1]), dtype=float) * np.ones(x.shape[:2])
    return np.full((mesh.n_triangles, len(rule.weights)), float(gamma))


def function_qp(mesh, f, rule=TRIANGLE_RULE, vector=False):
    """Data at quadrature points from None, a scalar, an array or a callable ``f(x, y)``."""
    shape = (mesh.n_triangles, len(rule.weights)) + ((2,) if vector else ())
    if f is None:
        return np.zeros(shape)
    if isinstance(f, np.ndarray) and f.shape == shape:
        return f
    if callable(f):
        x = quadrature_points(mesh, rule)
        v = f(x[..., 0], x[..., 1])
        if vector:
            return np.stack([np.asarray(v[0], float) * np.ones(shape[:2]),
                             np.asarray(v[1], float) * np.ones(shape[:2])], axis=-1)
        return np.asarray(v, dtype=float) * np.ones(shape)
    return np.broadcast_to(np.asarray(f, dtype=float), shape).copy()
