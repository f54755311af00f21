import dataclasses

import numpy as np
import pytest

from kvmixed.fem import CoefficientField, FunctionSpace, error_norms, triple_norm
from kvmixed.fields import FeField, lookup
from kvmixed.mesh import disc_study_mesh, region_area
from kvmixed.reconstruction import (Dataset, LevelProblem, ReconConfig, ReconResult, ReconState,
                                    ReconstructionError, descent_step, eval_objective, fd_gradient_check,
                                    gradient_integrand, gradient_vector, interpolate_coefficient,
                                    manufacture_sources, read_gamma, reconstruct, smoothed_gradient, write_gamma)

LINEAR_DATA = ("harmonic(1, 0, 1)", "harmonic(1, 1, 0)")  # boundary values x and y


@pytest.fixture(scope="module")
def coarse():
    return disc_study_mesh(0.5)


@pytest.fixture(scope="module")
def bump_problem(coarse):
    cfg = ReconConfig(k=1, l=1, max_iter=5)
    src = manufacture_sources(coarse, "bump", cfg.boundary_data, k=2, refine=1)
    return LevelProblem(coarse, [s.sample(coarse) for s in src], cfg), src


def _linear_problem(mesh, **kw):
    cfg = ReconConfig(boundary_data=LINEAR_DATA, gamma_true="one", k=1, l=1, beta0=0.0, **kw)
    src = manufacture_sources(mesh, "one", LINEAR_DATA, k=2, refine=1)
    return LevelProblem(mesh, [s.sample(mesh) for s in src], cfg), cfg, src


# ---------------------------------------------------------------------------
# configuration and data


@pytest.mark.parametrize("kw", [dict(step=0.0), dict(tol=0.0), dict(k=1, l=2), dict(k=3),
                                dict(gradient_mode="newton"), dict(update_mode="bfgs"), dict(boundary_data=()),
                                dict(gamma0=0.05)])
def test_config_validation(kw):
    with pytest.raises(ReconstructionError):
        ReconConfig(**kw)


def test_dataset_needs_data(coarse):
    with pytest.raises(ReconstructionError):
        Dataset("empty", coarse, None, None)


def test_sampled_flux_matches_analytic(coarse):
    src = manufacture_sources(coarse, "one", ["harmonic(1, 0, 1)"], k=2, refine=1)[0]
    d = src.sample(coarse)
    edges = d.flux.edges
    assert len(edges) > 0
    mid = coarse.edge_midpoints()[edges]
    # grad u = (1, 0): outward flux is the x-component of the outward normal
    n = coarse.edge_normals()[edges] * coarse.boundary_outward_sign()[np.searchsorted(coarse.boundary_edges, edges)][:, None]
    assert np.allclose(d.flux.psi, n[:, :1], atol=1e-10)
    assert np.all(np.arctan2(mid[:, 1], mid[:, 0]) % (2 * np.pi) <= 1.5 * np.pi + 1e-12)


# ---------------------------------------------------------------------------
# objective


def test_objective_vanishes_for_compatible_data(coarse):
    prob, _, _ = _linear_problem(coarse)
    ev = prob.evaluate(prob.field(np.ones(prob.G.ndof)))
    assert ev.objective <= 1e-12
    assert ev.components["constraint"] <= 1e-12


def test_objective_of_zero_fields(coarse):
    cfg = ReconConfig(k=1, l=1, sector=None)
    prob = LevelProblem(coarse, [Dataset("one", coarse, np.ones((coarse.n_triangles, 16)))], cfg)
    V, RT, X = prob.spaces
    ev = eval_objective(prob, prob.field(np.ones(prob.G.ndof)), [(V.function(), RT.function(), X.function())])
    assert ev.objective == pytest.approx(0.5 * cfg.alpha * region_area(coarse, "omega"), rel=1e-13)


def test_objective_matches_independent_evaluation(bump_problem):
    prob, src = bump_problem
    rng = np.random.default_rng(5)
    gam = prob.field(rng.uniform(0.7, 1.6, prob.G.ndof))
    ev = prob.evaluate(gam)
    expect = 0.0
    for s, (u, sg, z) in zip(src, ev.states):
        tn = triple_norm(u, sg, z, prob.cfg.alpha, prob.beta, gamma=gam.function)
        expect += 0.5 * tn["mismatch"] + 0.5 * tn["boundary_flux"]
        expect += 0.5 * prob.cfg.alpha * error_norms(u, FeField(s.u), "omega")[0] ** 2
    assert ev.objective == pytest.approx(expect, rel=1e-10)


def test_tikhonov_only_when_explicit(bump_problem):
    prob, _ = bump_problem
    gam = prob.field(1.0 + 0.1 * prob.G.node_coordinates()[:, 0])
    states = prob.solve_states(gam)
    a = eval_objective(prob, gam, states)
    prob_explicit = LevelProblem(prob.mesh, prob.datasets, dataclasses.replace(prob.cfg, explicit_tikhonov=True))
    b = eval_objective(prob_explicit, gam, states)
    h = prob.h
    assert a.components["tikhonov"] == pytest.approx(0.5 * h * 0.01 * 1.0 * np.pi, rel=0.05)
    assert b.objective == pytest.approx(a.objective + a.components["tikhonov"], rel=1e-14)


# ---------------------------------------------------------------------------
# gradient


def test_gradient_integrand_oracles(coarse):
    V, RT, X = FunctionSpace(coarse, "CG", 1), FunctionSpace(coarse, "RT", 0), FunctionSpace(coarse, "DG", 0)
    from kvmixed.fem import lagrange_interpolate, rt_interpolate
    u = lagrange_interpolate(V, lambda x, y: x)
    ones = np.ones((coarse.n_triangles, 16))
    G = gradient_integrand([(u, RT.function(), X.function())], ones, "exact")
    assert np.allclose(G, 0.5, atol=1e-13)
    G = gradient_integrand([(u, RT.function(), X.function())], ones, "literal")
    assert np.allclose(G, 1.0, atol=1e-13)
    s = rt_interpolate(RT, lambda x, y: (2.0 + 0 * x, 0 * x))
    G = gradient_integrand([(u, s, X.function())], 2 * ones, "exact")
    assert np.max(np.abs(G)) <= 1e-13
    # two datasets add up
    G2 = gradient_integrand([(u, RT.function(), X.function())] * 2, ones, "exact")
    assert np.allclose(G2, 1.0)
    with pytest.raises(ReconstructionError):
        gradient_integrand([], ones, "other")


def test_smoother_oracles(coarse):
    prob, _, _ = _linear_problem(coarse)
    g, n = smoothed_gradient(prob, np.zeros(prob.G.ndof))
    assert n == 0 and not np.any(g)
    ones = prob.mass @ np.ones(prob.G.ndof)  # (1, v)
    g, n = smoothed_gradient(prob, ones)
    assert np.allclose(g, 1.0, atol=1e-10)
    assert n == pytest.approx(np.sqrt(prob.mesh.areas().sum()), rel=1e-10)


def test_smoother_damps_oscillation():
    m = disc_study_mesh(0.3, 1)
    prob, _, _ = _linear_problem(m)
    from kvmixed.fem import load_vector, quadrature_weights
    sgn = np.where(np.arange(m.n_triangles) % 2 == 0, 1.0, -1.0)
    G = np.broadcast_to(sgn[:, None], (m.n_triangles, 16))
    g, gn = smoothed_gradient(prob, load_vector(prob.G, G))
    assert gn < np.sqrt(np.sum(quadrature_weights(m) * G ** 2))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fd_gradient_check(bump_problem, seed):
    prob, _ = bump_problem
    rng = np.random.default_rng(seed)
    gam = prob.field(1.0 + 0.3 * rng.random(prob.G.ndof))
    v = rng.normal(size=prob.G.ndof)
    chk = fd_gradient_check(prob, gam, v)
    assert chk.best <= 1e-4


def test_fd_zero_direction(bump_problem):
    prob, _ = bump_problem
    chk = fd_gradient_check(prob, prob.field(np.ones(prob.G.ndof)), np.zeros(prob.G.ndof), eps=(1e-4,))
    assert chk.analytic == 0.0 and chk.rows[0][1] == 0.0


def test_fd_at_critical_point(coarse):
    prob, _, _ = _linear_problem(coarse)
    v = np.random.default_rng(0).normal(size=prob.G.ndof)
    chk = fd_gradient_check(prob, prob.field(np.ones(prob.G.ndof)), v, explicit_tikhonov=False)
    assert abs(chk.analytic) <= 1e-10
    assert all(abs(r[1]) <= 1e-6 for r in chk.rows)


def test_literal_integrand_fails_fd_check(bump_problem):
    prob, _ = bump_problem
    rng = np.random.default_rng(0)
    gam = prob.field(1.0 + 0.3 * rng.random(prob.G.ndof))
    assert fd_gradient_check(prob, gam, rng.normal(size=prob.G.ndof), mode="literal").best > 1e-2


def _inverse_crime_gradient(level, gamma_nodal=None):
    """Smoothed-gradient norm with data generated from the P1 coefficient on the same mesh."""
    m = disc_study_mesh(0.3, level)
    cfg = ReconConfig(k=2, l=1)
    gamma_star = CoefficientField.interpolate(m, lookup("bump"), 1)
    src = manufacture_sources(m, FeField(gamma_star.function), cfg.boundary_data, k=2, refine=0)
    prob = LevelProblem(m, [s.sample(m) for s in src], cfg)
    gam = gamma_star if gamma_nodal is None else prob.field(gamma_nodal(prob))
    ev = prob.evaluate(gam)
    _, gn = smoothed_gradient(prob, gradient_vector(prob, gam, ev.states))
    return gn, error_norms(gamma_star.function)[0]


@pytest.mark.xfail(strict=True, reason="continuation states converge slowly away from the data; the smoothed "
                                       "gradient at the generating coefficient is ~1e-2 at desk-scale meshes")
def test_gradient_vanishes_at_generating_coefficient():
    gn, norm_gamma = _inverse_crime_gradient(1)
    assert gn <= 1e-3 * norm_gamma


def test_gradient_small_and_shrinking_at_generating_coefficient():
    g1, _ = _inverse_crime_gradient(1)
    g2, _ = _inverse_crime_gradient(2)
    g_start, _ = _inverse_crime_gradient(1, lambda p: np.ones(p.G.ndof))
    assert g2 < g1 < 0.2 * g_start


# ---------------------------------------------------------------------------
# descent


def test_zero_gradient_leaves_gamma(coarse):
    prob, _, _ = _linear_problem(coarse)
    st = ReconState(prob.field(np.ones(prob.G.ndof)))
    st.evaluation = prob.evaluate(st.gamma)
    before = st.gamma.nodal.copy()
    assert descent_step(prob, st, np.zeros(prob.G.ndof), 0.8) == 0.0
    assert np.array_equal(st.gamma.nodal, before)


def test_first_step_reduces_objective(bump_problem):
    prob, _ = bump_problem
    st = ReconState(prob.field(np.ones(prob.G.ndof)))
    st.evaluation = prob.evaluate(st.gamma)
    l0 = st.evaluation.objective
    g, _ = smoothed_gradient(prob, gradient_vector(prob, st.gamma, st.evaluation.states))
    step = descent_step(prob, st, g, 0.8)
    assert step > 0 and st.evaluation.objective < l0
    assert st.gamma.min() >= 0.1


def test_constant_target_terminates_immediately(coarse):
    _, cfg, src = _linear_problem(coarse)
    res = reconstruct(dataclasses.replace(cfg, levels=1, max_iter=10), base_mesh=coarse, sources=src)
    assert res.levels[0].iterations <= 2
    assert res.levels[0].grad_norm <= cfg.tol


@pytest.fixture(scope="module")
def short_run(coarse):
    cfg = ReconConfig(k=1, l=1, levels=2, max_iter=4, h0=0.5)
    return reconstruct(cfg, base_mesh=coarse)


def test_short_run_logs(short_run):
    assert isinstance(short_run, ReconResult)
    lines = short_run.log_csv().strip().split("\n")
    assert lines[0] == "level,iter,objective,grad_norm,step,gamma_err_l2"
    assert len({len(l.split(",")) for l in lines}) == 1
    for lev in (0, 1):
        obj = [r["objective"] for r in short_run.log if r["level"] == lev]
        assert all(b <= a for a, b in zip(obj, obj[1:]))
    assert short_run.levels_csv().startswith("level,h,iterations")
    assert short_run.errors()[-1] < short_run.initial_error


def test_short_run_deterministic(short_run, coarse):
    again = reconstruct(short_run.config, base_mesh=coarse)
    assert again.log_csv() == short_run.log_csv()


def test_single_dataset_and_literal_modes(coarse):
    cfg = ReconConfig(k=1, l=1, levels=1, max_iter=3, h0=0.5, boundary_data=("trig(2,1)",))
    res = reconstruct(cfg, base_mesh=coarse)
    assert np.isfinite(res.levels[0].gamma_err_l2)
    lit = reconstruct(dataclasses.replace(cfg, update_mode="literal", gradient_mode="literal", step=0.05),
                      base_mesh=coarse)
    assert np.all(lit.levels[0].gamma.nodal >= 0.1)


def test_interpolate_coefficient_preserves_linears(coarse):
    from kvmixed.mesh import refine_uniform
    g = CoefficientField.interpolate(coarse, lambda x, y: 1.5 + 0.2 * x - 0.1 * y)
    fine = refine_uniform(coarse)
    gi = interpolate_coefficient(g, fine)
    p = gi.space.node_coordinates()
    assert np.allclose(gi.nodal, 1.5 + 0.2 * p[:, 0] - 0.1 * p[:, 1], atol=1e-12)


def test_gamma_dump_round_trip(tmp_path, coarse):
    g = CoefficientField.interpolate(coarse, lookup("bump"))
    p = tmp_path / "gamma.txt"
    write_gamma(g, p)
    assert p.read_text().startswith(f"gamma {g.space.ndof}\n")
    assert np.array_equal(read_gamma(p), g.nodal)
    p.write_text("gamma 3\n1.0\n")
    with pytest.raises(ReconstructionError):
        read_gamma(p)
