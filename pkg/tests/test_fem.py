import math
import os
import subprocess
import sys

import numpy as np
import pytest
import scipy.sparse as sp
import sympy
from hypothesis import given, settings, strategies as st

from kvmixed import _accel
from kvmixed.fem import (EDGE_RULE, TRIANGLE_RULE, AssemblyError, CoefficientField, FunctionSpace, SpaceError,
                         assemble_gradient_smoother, assemble_saddle, divergence_matrix, error_norms,
                         l2_project_dg, lagrange_interpolate, load_vector, mass_matrix, quadrature_points,
                         quadrature_weights, rt_interpolate, to_coo_text, triple_norm)
from kvmixed.fem.spaces import edge_local_index
from kvmixed.fields import Flux, lookup
from kvmixed.mesh import (EVERYWHERE, OMEGA, TriMesh, disc_study_mesh, refine_uniform, tag_triangles,
                          unit_disc_mesh, unit_square_mesh)
from kvmixed.solver import relative_residual

X, Y = sympy.symbols("x y", real=True)


def one_triangle(p0=(0.1, -0.2), p1=(1.3, 0.15), p2=(0.4, 0.9)):
    return tag_triangles(TriMesh.from_arrays([p0, p1, p2], [[0, 1, 2]]), EVERYWHERE)


def sym_integral(expr, corners):
    """Exact integral over a triangle by the affine pull-back to the reference element."""
    s, t = sympy.symbols("s t", real=True)
    (a0, b0), (a1, b1), (a2, b2) = [tuple(map(sympy.nsimplify, c)) for c in corners]
    xs = a0 + (a1 - a0) * s + (a2 - a0) * t
    ys = b0 + (b1 - b0) * s + (b2 - b0) * t
    det = abs((a1 - a0) * (b2 - b0) - (a2 - a0) * (b1 - b0))
    inner = sympy.integrate(expr.subs({X: xs, Y: ys}, simultaneous=True), (s, 0, 1 - t))
    return sympy.integrate(inner, (t, 0, 1)) * det


def square_study(n=3):
    return tag_triangles(unit_square_mesh(n), EVERYWHERE)


# ---------------------------------------------------------------------------
# quadrature


def test_rule_weights_sum():
    assert TRIANGLE_RULE.weights.sum() == pytest.approx(0.5, abs=1e-15)
    assert EDGE_RULE.weights.sum() == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("a,b", [(a, b) for a in range(7) for b in range(7) if a + b <= 6])
def test_triangle_rule_exact_on_monomials(a, b):
    m = one_triangle()
    x = quadrature_points(m)
    num = float(np.sum(quadrature_weights(m) * x[..., 0] ** a * x[..., 1] ** b))
    exact = float(sym_integral(X ** a * Y ** b, m.vertices))
    assert num == pytest.approx(exact, abs=1e-13)


def test_edge_rule_degree_nine():
    t = EDGE_RULE.points
    for d in range(10):
        assert float(np.sum(EDGE_RULE.weights * t ** d)) == pytest.approx(1.0 / (d + 1), abs=1e-15)


# ---------------------------------------------------------------------------
# dof maps


@pytest.mark.parametrize("family,order,ndof", [("CG", 1, 4), ("RT", 0, 5), ("DG", 0, 2), ("CG", 2, 9),
                                               ("RT", 1, 14), ("DG", 1, 6)])
def test_dof_counts_unit_square(family, order, ndof):
    assert FunctionSpace(unit_square_mesh(1), family, order).ndof == ndof


@pytest.mark.parametrize("family,order", [("CG", 3), ("RT", 2), ("DG", 2), ("N1", 0)])
def test_unsupported_spaces(family, order):
    with pytest.raises(SpaceError):
        FunctionSpace(unit_square_mesh(1), family, order)


@pytest.mark.parametrize("order", [0, 1])
def test_rt_normal_trace_continuity(order):
    m = unit_disc_mesh(0.4)
    RT = FunctionSpace(m, "RT", order)
    f = RT.function(np.random.default_rng(order).normal(size=RT.ndof))
    interior = np.flatnonzero(m.edge_triangles[:, 1] >= 0)
    n = m.edge_normals()[interior]
    v0, _ = f.on_edges(interior, side=0)
    v1, _ = f.on_edges(interior, side=1)
    assert np.max(np.abs(np.einsum("eqc,ec->eq", v0 - v1, n))) <= 1e-12


def test_cg_continuity_across_edges():
    m = unit_disc_mesh(0.4)
    V = FunctionSpace(m, "CG", 2)
    f = V.function(np.random.default_rng(3).normal(size=V.ndof))
    interior = np.flatnonzero(m.edge_triangles[:, 1] >= 0)
    v0, _ = f.on_edges(interior, side=0)
    v1, _ = f.on_edges(interior, side=1)
    assert np.max(np.abs(v0 - v1)) <= 1e-12


# ---------------------------------------------------------------------------
# symbolic element-matrix oracles


def test_rt0_mass_matrix_single_triangle():
    m = one_triangle()
    RT = FunctionSpace(m, "RT", 0)
    M = mass_matrix(RT).toarray()
    c = [sympy.Matrix([sympy.nsimplify(a), sympy.nsimplify(b)]) for a, b in m.vertices]
    area = sympy.Rational(1, 2) * abs((c[1] - c[0])[0] * (c[2] - c[0])[1] - (c[2] - c[0])[0] * (c[1] - c[0])[1])
    xv = sympy.Matrix([X, Y])
    phi = []
    for i in range(3):  # local edge i is opposite vertex i
        e = c[(i + 2) % 3] - c[(i + 1) % 3]
        phi.append(sympy.sqrt(e.dot(e)) / (2 * area) * (xv - c[i]))
    exact = np.array([[float(sym_integral(phi[i].dot(phi[j]), m.vertices)) for j in range(3)] for i in range(3)])
    # local basis is outward; global dofs follow the canonical edge orientation
    S = np.zeros((3, 3))
    S[np.arange(3), m.tri_edges[0]] = m.tri_edge_signs[0]
    assert np.max(np.abs(S.T @ exact @ S - M)) <= 1e-13


def test_saddle_sigma_block_is_rt_mass_for_unit_gamma():
    m = one_triangle()
    sys_ = assemble_saddle(m, 1.0, alpha=1.0, beta=0.0, k=1, omega="all")
    nu = 3
    Ass = sys_.matrix.toarray()[nu:nu + 3, nu:nu + 3]
    assert np.allclose(Ass, mass_matrix(FunctionSpace(m, "RT", 0)).toarray(), atol=1e-14)


def test_p1_mass_matrix_reference_triangle():
    m = TriMesh.from_arrays([(0, 0), (1, 0), (0, 1)], [[0, 1, 2]])
    S, _ = assemble_gradient_smoother(m, 1, h=0.0)
    S = S.toarray()
    area = 0.5
    assert np.allclose(np.diag(S), area / 6, atol=1e-15)
    assert np.allclose(S[~np.eye(3, dtype=bool)], area / 12, atol=1e-15)


def test_smoother_spd_and_zero_rhs():
    m = unit_square_mesh(4)
    S, V = assemble_gradient_smoother(m, 1)
    assert abs(S - S.T).max() == 0
    assert np.linalg.eigvalsh(S.toarray()).min() > 0
    assert np.all(sp.linalg.spsolve(S.tocsc(), np.zeros(V.ndof)) == 0)


# ---------------------------------------------------------------------------
# saddle system


def _random_gamma(mesh, seed):
    V = FunctionSpace(mesh, "CG", 1)
    g = np.random.default_rng(seed).uniform(0.5, 2.0, V.ndof)
    return CoefficientField(V.function(g), floor=0.1)


@pytest.mark.parametrize("k", [1, 2])
def test_saddle_symmetry(k):
    m = disc_study_mesh(0.5, 1)
    sys_ = assemble_saddle(m, _random_gamma(m, k), alpha=3.0, beta=0.7, q=lambda x, y: x, f=lambda x, y: y, k=k)
    assert sys_.symmetry_defect() <= 1e-13


def test_saddle_zero_data_zero_rhs():
    m = disc_study_mesh(0.5)
    sys_ = assemble_saddle(m, 1.0, alpha=1.0, beta=0.0, k=2)
    assert not np.any(sys_.rhs)


def test_saddle_block_sizes():
    m = disc_study_mesh(0.5)
    sys_ = assemble_saddle(m, 1.0, alpha=1.0, beta=0.0, k=2)
    V, RT, Xs = (FunctionSpace(m, "CG", 2), FunctionSpace(m, "RT", 1), FunctionSpace(m, "DG", 1))
    assert sys_.block_sizes == (V.ndof, RT.ndof, Xs.ndof)
    assert sys_.matrix.shape == (sys_.n_full, sys_.n_full)


def test_saddle_rejects_bad_parameters():
    m = disc_study_mesh(0.5)
    with pytest.raises(AssemblyError):
        assemble_saddle(m, 1.0, alpha=0.0, beta=0.0)
    with pytest.raises(AssemblyError):
        assemble_saddle(m, 1.0, alpha=1.0, beta=-1.0)
    low = CoefficientField.constant(m, 0.05, floor=0.1)
    with pytest.raises(AssemblyError, match="floor"):
        assemble_saddle(m, low, alpha=1.0, beta=0.0)
    with pytest.raises(SpaceError):
        assemble_saddle(m, 1.0, alpha=1.0, beta=0.0, k=3)
    other = disc_study_mesh(0.5)
    spaces = (FunctionSpace(other, "CG", 1), FunctionSpace(other, "RT", 0), FunctionSpace(other, "DG", 0))
    with pytest.raises(AssemblyError, match="different mesh"):
        assemble_saddle(m, 1.0, alpha=1.0, beta=0.0, spaces=spaces)


@pytest.mark.parametrize("k,name", [(1, "x+y"), (2, "x2-y2")])
def test_exact_triple_satisfies_system(k, name):
    m = disc_study_mesh(0.3)
    u = lookup(name)
    sys_ = assemble_saddle(m, 1.0, alpha=1000.0, beta=0.0, q=u, k=k)
    V, RT, _ = (FunctionSpace(m, "CG", k), FunctionSpace(m, "RT", k - 1), None)
    x = np.concatenate([lagrange_interpolate(V, u).coef, rt_interpolate(RT, Flux(u)).coef,
                        np.zeros(sys_.block_sizes[2])])
    assert relative_residual(sys_.matrix, x, sys_.rhs) <= 1e-10


def test_literal_data_scaling_drops_alpha():
    m = disc_study_mesh(0.5)
    a = assemble_saddle(m, 1.0, alpha=10.0, beta=0.0, q=lambda x, y: 1.0 + x)
    b = assemble_saddle(m, 1.0, alpha=10.0, beta=0.0, q=lambda x, y: 1.0 + x, data_scaling="literal")
    assert np.allclose(a.rhs, 10.0 * b.rhs, rtol=1e-14, atol=0)


def test_coo_export(tmp_path):
    m = unit_square_mesh(1)
    A = mass_matrix(FunctionSpace(m, "CG", 1))
    p = tmp_path / "a.coo"
    to_coo_text(A, p)
    data = np.loadtxt(p)
    B = sp.coo_matrix((data[:, 2], (data[:, 0].astype(int), data[:, 1].astype(int))), shape=A.shape)
    assert abs(A - B).max() == 0


# ---------------------------------------------------------------------------
# interpolation and projection


@pytest.mark.parametrize("order", [0, 1])
def test_rt_reproduces_constants(order):
    m = unit_disc_mesh(0.4)
    f = rt_interpolate(FunctionSpace(m, "RT", order), lambda x, y: (np.ones_like(x), np.zeros_like(x)))
    v = f.values_qp()
    assert np.max(np.abs(v[..., 0] - 1)) <= 1e-13 and np.max(np.abs(v[..., 1])) <= 1e-13


def test_rt1_reproduces_its_own_space():
    m = unit_disc_mesh(0.4)
    RT = FunctionSpace(m, "RT", 1)
    # x * (x, y) lies in x P0, so this field is in RT1
    inside = lambda x, y: (x * x - y + 1, x * y + 2 * x)  # noqa: E731
    e, _ = error_norms(rt_interpolate(RT, inside), lambda x, y: np.stack(inside(x, y), -1))
    assert e <= 1e-13
    outside = lambda x, y: (y * y, 0 * x)  # noqa: E731
    e2, _ = error_norms(rt_interpolate(RT, outside), lambda x, y: np.stack(outside(x, y), -1))
    assert e2 > 1e-6


@pytest.mark.parametrize("order", [0, 1])
@pytest.mark.parametrize("field", ["linear", "quadratic"])
def test_rt_divergence_orthogonality(order, field):
    m = unit_disc_mesh(0.3)
    RT = FunctionSpace(m, "RT", order)
    Xp = FunctionSpace(m, "DG", order)
    if field == "linear":
        sig, div = (lambda x, y: (x, y)), (lambda x, y: 2.0 + 0 * x)
    else:
        sig, div = (lambda x, y: (x * x, x * y)), (lambda x, y: 3.0 * x)
    r = rt_interpolate(RT, sig)
    exact = load_vector(Xp, div(*np.moveaxis(quadrature_points(m), -1, 0)))
    disc = -divergence_matrix(Xp, RT) @ r.coef
    assert np.max(np.abs(exact - disc)) <= 1e-12


def test_rt0_interpolation_error_symbolic():
    m = one_triangle()
    RT = FunctionSpace(m, "RT", 0)
    r = rt_interpolate(RT, lambda x, y: (x * x, 0 * x))
    num, _ = error_norms(r, lambda x, y: np.stack([x * x, 0 * x], -1))

    c = [sympy.Matrix([sympy.nsimplify(a), sympy.nsimplify(b)]) for a, b in m.vertices]
    area = sympy.Rational(1, 2) * abs((c[1] - c[0])[0] * (c[2] - c[0])[1] - (c[2] - c[0])[0] * (c[1] - c[0])[1])
    sigma = sympy.Matrix([X ** 2, 0])
    xv = sympy.Matrix([X, Y])
    tt = sympy.symbols("tt")
    r_sym = sympy.zeros(2, 1)
    for i in range(3):
        a, b = c[(i + 1) % 3], c[(i + 2) % 3]
        e = b - a
        L = sympy.sqrt(e.dot(e))
        n_out = sympy.Matrix([e[1], -e[0]]) / L  # counter-clockwise: outward
        pt = a + tt * e
        mean_flux = sympy.integrate(sigma.subs({X: pt[0], Y: pt[1]}, simultaneous=True).dot(n_out), (tt, 0, 1))
        r_sym += mean_flux * L / (2 * area) * (xv - c[i])
    d = sigma - r_sym
    exact = math.sqrt(float(sym_integral(sympy.expand(d.dot(d)), m.vertices)))
    assert num == pytest.approx(exact, rel=1e-12)


def test_l2_projection_basics():
    m = one_triangle()
    X0 = FunctionSpace(m, "DG", 0)
    assert l2_project_dg(X0, lambda x, y: 2.5 + 0 * x).coef[0] == pytest.approx(2.5, abs=1e-14)
    assert l2_project_dg(X0, lambda x, y: x).coef[0] == pytest.approx(m.barycenters()[0, 0], abs=1e-14)


def test_l2_projection_rate():
    f = lambda x, y: np.sin(2 * x) * np.cos(y)  # noqa: E731
    m = unit_square_mesh(4)
    errs = []
    for _ in range(2):
        p = l2_project_dg(FunctionSpace(m, "DG", 0), f)
        errs.append(error_norms(p, f)[0])
        m = refine_uniform(m)
    assert errs[0] / errs[1] >= 1.8


def test_interpolation_type_checks():
    m = unit_square_mesh(1)
    with pytest.raises(SpaceError):
        lagrange_interpolate(FunctionSpace(m, "DG", 0), lambda x, y: x)
    with pytest.raises(SpaceError):
        l2_project_dg(FunctionSpace(m, "CG", 1), lambda x, y: x)
    with pytest.raises(SpaceError):
        rt_interpolate(FunctionSpace(m, "CG", 1), lambda x, y: (x, y))


def test_lagrange_interpolation_is_nodal():
    m = unit_disc_mesh(0.4)
    V = FunctionSpace(m, "CG", 2)
    f = lagrange_interpolate(V, lambda x, y: x * x - 3 * x * y)
    p = V.node_coordinates()
    assert np.allclose(f(p), p[:, 0] ** 2 - 3 * p[:, 0] * p[:, 1], atol=1e-12)


def test_fe_function_point_evaluation_and_length_check():
    m = unit_disc_mesh(0.3)
    V = FunctionSpace(m, "CG", 2)
    f = lagrange_interpolate(V, lambda x, y: 1 + x * y)
    pts = np.array([[0.1, 0.2], [-0.5, 0.3], [0.0, -0.9]])
    assert np.allclose(f(pts), 1 + pts[:, 0] * pts[:, 1], atol=1e-12)
    assert np.allclose(f.derivs(pts), np.stack([pts[:, 1], pts[:, 0]], -1), atol=1e-12)
    with pytest.raises(SpaceError):
        V.function(np.zeros(3))


# ---------------------------------------------------------------------------
# norms


def test_error_norms_oracles():
    m = unit_square_mesh(3)
    V = FunctionSpace(m, "CG", 1)
    u = lagrange_interpolate(V, lambda x, y: x)
    assert error_norms(u, lookup("harmonic(1, 0, 1)")) == pytest.approx((0.0, 0.0), abs=1e-14)
    l2, h1 = error_norms(u)
    assert l2 == pytest.approx(1 / math.sqrt(3), abs=1e-14)
    assert h1 == pytest.approx(1.0, abs=1e-14)
    with pytest.raises(KeyError):
        error_norms(u, region="omega")


def test_error_norms_interpolant_rate():
    u = lookup("r3sin3t")
    m = unit_disc_mesh(0.2)
    errs = []
    for _ in range(3):
        errs.append(error_norms(lagrange_interpolate(FunctionSpace(m, "CG", 1), u), u)[0])
        m = refine_uniform(m)
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.8)


def test_triple_norm_zero():
    m = disc_study_mesh(0.5)
    V, RT, X0 = FunctionSpace(m, "CG", 1), FunctionSpace(m, "RT", 0), FunctionSpace(m, "DG", 0)
    tn = triple_norm(V.function(), RT.function(), X0.function(), alpha=5.0, beta=1.0)
    assert tn["total"] == 0.0


def test_triple_norm_boundary_jump_oracle():
    m = disc_study_mesh(0.4)
    V, RT, X0 = FunctionSpace(m, "CG", 1), FunctionSpace(m, "RT", 0), FunctionSpace(m, "DG", 0)
    z = X0.function(np.ones(X0.ndof))
    tn = triple_norm(V.function(), RT.function(), z, alpha=0.0, beta=0.0)
    b = m.boundary_edges
    expected = np.sum(m.edge_lengths()[b] / m.diameters()[m.edge_triangles[b, 0]])
    assert tn["z_1h"] == pytest.approx(expected, rel=1e-13)
    assert tn["total"] == pytest.approx(math.sqrt(expected), rel=1e-13)


def test_triple_norm_exact_flux_has_no_mismatch():
    m = disc_study_mesh(0.4)
    V, RT, X0 = FunctionSpace(m, "CG", 1), FunctionSpace(m, "RT", 0), FunctionSpace(m, "DG", 0)
    u = lagrange_interpolate(V, lambda x, y: 2 * x - y)
    s = rt_interpolate(RT, lambda x, y: (3.0 * 2 + 0 * x, -3.0 + 0 * x))
    tn = triple_norm(u, s, X0.function(), alpha=1.0, beta=1.0, gamma=3.0)
    assert tn["mismatch"] <= 1e-26
    assert set(tn) == {"h1", "omega", "mismatch", "z_1h", "boundary_flux", "div", "total"}


# ---------------------------------------------------------------------------
# kernel back-ends


def _kernel_inputs(seed=0):
    rng = np.random.default_rng(seed)
    w = rng.random((17, 16))
    A = rng.normal(size=(17, 16, 6, 2))
    B = rng.normal(size=(17, 16, 8, 2))
    G = rng.normal(size=(17, 16, 2))
    return w, A, B, G


def test_numba_numpy_kernels_agree():
    w, A, B, G = _kernel_inputs()
    Kn = _accel.element_bilinear_numba(w, A, B)
    Kp = _accel.element_bilinear_numpy(w, A, B)
    assert np.max(np.abs(Kn - Kp)) <= 1e-12
    Fn = _accel.element_linear_numba(w, A, G)
    Fp = _accel.element_linear_numpy(w, A, G)
    assert np.max(np.abs(Fn - Fp)) <= 1e-12


def test_numba_numpy_locate_agree():
    m = unit_disc_mesh(0.3)
    pts = np.random.default_rng(2).uniform(-0.7, 0.7, (500, 2))
    from kvmixed.fem.spaces import locator
    loc = locator(m)
    _, cand = loc.tree.query(pts, k=loc.k)
    cand = np.ascontiguousarray(cand, dtype=np.int64)
    a = _accel.locate_numba(pts, cand, m.corners())
    b = _accel.locate_numpy(pts, cand, m.corners())
    assert np.array_equal(a[0], b[0])
    assert np.allclose(a[1], b[1], atol=1e-14)


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, KVMIXED_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "import kvmixed; print(kvmixed.backend())"], env=env,
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_assembly_identical_under_both_backends(monkeypatch):
    m = disc_study_mesh(0.5)
    gam = _random_gamma(m, 7)
    kw = dict(alpha=2.0, beta=0.3, q=lambda x, y: x, f=lambda x, y: y, k=2)
    monkeypatch.setattr(_accel, "USE_NUMBA", True)
    a = assemble_saddle(m, gam, **kw)
    monkeypatch.setattr(_accel, "USE_NUMBA", False)
    b = assemble_saddle(m, gam, **kw)
    assert abs(a.matrix - b.matrix).max() <= 1e-12
    assert np.max(np.abs(a.rhs - b.rhs)) <= 1e-12


# ---------------------------------------------------------------------------
# properties on random triangles

coord = st.floats(-2.0, 2.0, allow_nan=False)


def _valid_triangle(p):
    a = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1])
    return a > 1e-2


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(coord, coord), min_size=3, max_size=3).filter(_valid_triangle))
def test_p1_mass_sums_to_area(p):
    m = TriMesh.from_arrays(p, [[0, 1, 2]])
    M = mass_matrix(FunctionSpace(m, "CG", 1)).toarray()
    assert M.sum() == pytest.approx(m.areas()[0], rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(coord, coord), min_size=3, max_size=3).filter(_valid_triangle),
       st.integers(0, 1), st.integers(0, 10_000))
def test_rt_divergence_theorem(p, order, seed):
    m = TriMesh.from_arrays(p, [[0, 1, 2]])
    RT = FunctionSpace(m, "RT", order)
    f = RT.function(np.random.default_rng(seed).normal(size=RT.ndof))
    div_int = float(np.sum(quadrature_weights(m) * f.derivs_qp()))
    b = m.boundary_edges
    cells, loc = edge_local_index(m, b)
    vals, _ = f.on_edges(b)
    n = m.edge_normals()[b] * m.boundary_outward_sign()[:, None]
    flux = np.sum(m.edge_lengths()[b] * (np.einsum("eqc,ec->eq", vals, n) @ EDGE_RULE.weights))
    assert div_int == pytest.approx(flux, rel=1e-10, abs=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.2, 5.0), st.floats(0.0, 3.0))
def test_saddle_symmetric_for_any_constant_gamma(g, beta):
    m = tag_triangles(unit_square_mesh(2), OMEGA)
    assert assemble_saddle(m, g, alpha=1.0, beta=beta, k=1).symmetry_defect() <= 1e-13
