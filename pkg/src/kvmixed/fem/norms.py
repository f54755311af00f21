"""Error norms and the stability norm of the primal-dual system."""

import numpy as np

from .quadrature import EDGE_RULE, TRIANGLE_RULE
from .spaces import coefficient_qp, edge_local_index, edge_points_physical, quadrature_points, quadrature_weights


def _region_weights(mesh, region, rule):
    w = quadrature_weights(mesh, rule)
    if region is None or region == "all":
        return w
    return w * mesh.region_mask(region)[:, None]


def _ref_at(ref, x, kind):
    """Evaluate a reference field (object with value/grad, or plain callable) at points ``x``."""
    if ref is None:
        return 0.0
    fn = getattr(ref, kind, None)
    if fn is None:
        if kind != "value":
            raise TypeError(f"reference provides no {kind}()")
        fn = ref
    v = fn(x[..., 0], x[..., 1])
    if isinstance(v, tuple):
        v = np.stack(v, axis=-1)
    return np.asarray(v, dtype=float)


def error_norms(fe, reference=None, region=None, rule=TRIANGLE_RULE):
    """``(L2 error, H1-seminorm error)`` over a tagged region (default: whole mesh).

    For RT functions the second entry is the L2 error of the divergence.
    ``reference`` is ``None`` (zero), a callable, or an object with
    ``value``/``grad`` (``div`` for vector fields) methods.
    """
    mesh = fe.space.mesh
    w = _region_weights(mesh, region, rule)
    x = quadrature_points(mesh, rule)
    e0 = fe.values_qp(rule) - _ref_at(reference, x, "value")
    e0 = e0 ** 2 if e0.ndim == 2 else np.sum(e0 ** 2, axis=-1)
    if fe.space.is_vector:
        need = reference is not None and hasattr(reference, "div")
        e1 = fe.derivs_qp(rule) - (_ref_at(reference, x, "div") if need else 0.0)
        e1 = e1 ** 2
    else:
        need = reference is not None and not (callable(reference) and not hasattr(reference, "grad"))
        e1 = fe.derivs_qp(rule) - (_ref_at(reference, x, "grad") if need else 0.0)
        e1 = np.sum(e1 ** 2, axis=-1)
    return float(np.sqrt(np.sum(w * e0))), float(np.sqrt(np.sum(w * e1)))


def broken_h1_squared(z, rule=TRIANGLE_RULE, edge_rule=EDGE_RULE):
    """``sum_T (||grad z||_T^2 + h_T^{-1} ||[z]||_{dT}^2)`` with ``[z] = z`` on the boundary."""
    mesh = z.space.mesh
    w = quadrature_weights(mesh, rule)
    grad = np.sum(w * np.sum(z.derivs_qp(rule) ** 2, axis=-1))
    hT = mesh.diameters()
    lens = mesh.edge_lengths()
    interior = np.flatnonzero(mesh.edge_triangles[:, 1] >= 0)
    jump = 0.0
    if len(interior):
        v0, _ = z.on_edges(interior, edge_rule.points, side=0)
        v1, _ = z.on_edges(interior, edge_rule.points, side=1)
        j2 = lens[interior] * ((v0 - v1) ** 2 @ edge_rule.weights)
        inv_h = 1.0 / hT[mesh.edge_triangles[interior, 0]] + 1.0 / hT[mesh.edge_triangles[interior, 1]]
        jump += float(np.sum(inv_h * j2))
    b = mesh.boundary_edges
    vb, _ = z.on_edges(b, edge_rule.points, side=0)
    jump += float(np.sum(lens[b] * (vb ** 2 @ edge_rule.weights) / hT[mesh.edge_triangles[b, 0]]))
    return float(grad) + jump


def triple_norm(u, sigma, z, alpha, beta, gamma=1.0, u_ref=None, sigma_ref=None, omega="omega",
                rule=TRIANGLE_RULE, edge_rule=EDGE_RULE):
    """Stability norm of ``(u - u_ref, sigma - sigma_ref, z)`` with its six squared components.

    ``gamma`` is a scalar, callable ``gamma(x, y)`` or anything with ``values_qp``.
    Returns a dict with keys ``h1, omega, mismatch, z_1h, boundary_flux, div``
    (squared, weighted as in the norm) and ``total`` (square root of the sum).
    """
    mesh = u.space.mesh
    w = quadrature_weights(mesh, rule)
    x = quadrature_points(mesh, rule)
    gq = coefficient_qp(mesh, gamma, rule)

    eu = u.values_qp(rule) - _ref_at(u_ref, x, "value")
    egu = u.derivs_qp(rule) - (_ref_at(u_ref, x, "grad") if u_ref is not None else 0.0)
    es = sigma.values_qp(rule) - (_ref_at(sigma_ref, x, "value") if sigma_ref is not None else 0.0)
    ediv = sigma.derivs_qp(rule) - (_ref_at(sigma_ref, x, "div") if sigma_ref is not None else 0.0)

    comp = {}
    comp["h1"] = beta * float(np.sum(w * (eu ** 2 + np.sum(egu ** 2, axis=-1))))
    om = mesh.region_mask(omega)[:, None] if omega in mesh.tri_region_tags else 0.0
    comp["omega"] = alpha * float(np.sum(w * om * eu ** 2))
    mis = gq[..., None] * egu - es
    comp["mismatch"] = float(np.sum(w * np.sum(mis ** 2, axis=-1) / gq))
    comp["z_1h"] = broken_h1_squared(z, rule, edge_rule)

    b = mesh.boundary_edges
    cells, loc = edge_local_index(mesh, b)
    vals, _ = sigma.space.tabulate_edges(cells, loc, edge_rule.points)
    sn = np.einsum("eqkc,ek,ec->eq", vals, sigma.local(cells), mesh.edge_normals()[b])
    if sigma_ref is not None:
        pts = edge_points_physical(mesh, b, edge_rule.points)
        sr = _ref_at(sigma_ref, pts, "value")
        sn = sn - np.einsum("eqc,ec->eq", sr, mesh.edge_normals()[b])
    comp["boundary_flux"] = beta * float(np.sum(mesh.edge_lengths()[b] * (sn ** 2 @ edge_rule.weights)))

    hT = mesh.diameters()[:, None]
    comp["div"] = float(np.sum(w * (hT * ediv) ** 2))
    comp["total"] = float(np.sqrt(sum(comp.values())))
    return comp
