"""Coefficient identification by smoothed steepest descent on the regularized Lagrangian."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .fem import (EDGE_RULE, CoefficientField, FluxBC, FunctionSpace, assemble_gradient_smoother,
                  assemble_saddle_multi, boundary_flux_matrix, error_norms, load_vector, mass_matrix,
                  quadrature_points,
                  quadrature_weights, saddle_spaces, stiffness_matrix)
from .fem.spaces import coefficient_qp, edge_points_physical
from .fields import FeField, lookup
from .mesh import disc_study_mesh, mesh_size, refine_uniform
from .solver import Factorization, ReusableSolver, forward_dirichlet

log = logging.getLogger(__name__)

GRADIENT_MODES = ("exact", "literal")
UPDATE_MODES = ("safeguarded", "literal")


class ReconstructionError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data


@dataclass(eq=False)
class DataSource:
    """A forward solution on a fine mesh from which datasets are sampled at any coarser level."""

    name: str
    u: object  # FeFunction on the fine mesh
    gamma: object  # coefficient used to produce it (callable with value/grad)

    def sample(self, mesh, omega="omega", sector="neumann"):
        x = quadrature_points(mesh)
        q = self.u(x)
        flux = None
        if sector is not None:
            edges = np.asarray(mesh.boundary_tag(sector), dtype=np.int64)
            if len(edges):
                pts = edge_points_physical(mesh, edges, EDGE_RULE.points)
                grad = self.u.derivs(pts)
                pos = np.searchsorted(mesh.boundary_edges, edges)
                n = mesh.edge_normals()[edges] * mesh.boundary_outward_sign()[pos][:, None]
                g = np.asarray(self.gamma(pts[..., 0], pts[..., 1]), dtype=float)
                flux = FluxBC(edges, g * np.einsum("eqc,ec->eq", grad, n))
        return Dataset(self.name, mesh, q, flux)


@dataclass(eq=False)
class Dataset:
    """Interior data ``q`` at the quadrature points of ``mesh`` and optional strong flux data."""

    name: str
    mesh: object
    q: np.ndarray | None
    flux: FluxBC | None = None
    f: object = None

    def __post_init__(self):
        if self.q is None and self.flux is None:
            raise ReconstructionError(f"dataset {self.name!r} carries neither interior nor flux data")


def manufacture_sources(mesh, gamma, boundary_data, k=2, refine=1):
    """Forward Dirichlet solves with ``gamma`` on ``mesh`` refined ``refine`` times (P``k``)."""
    fine = mesh
    for _ in range(refine):
        fine = refine_uniform(fine)
    gamma = lookup(gamma) if isinstance(gamma, str) else gamma
    out = []
    for spec in boundary_data:
        g = lookup(spec) if isinstance(spec, str) else spec
        out.append(DataSource(str(spec), forward_dirichlet(fine, gamma, g=g, k=k), gamma))
    return out


# ---------------------------------------------------------------------------
# configuration and state


@dataclass(frozen=True)
class ReconConfig:
    boundary_data: tuple = ("trig(2,1)", "trig(3,2)")
    gamma_true: str = "bump"
    gamma0: float = 1.0
    k: int = 2
    l: int = 1
    alpha: float = 1000.0
    beta0: float = 1e-3
    step: float = 0.8
    max_iter: int = 100
    tol: float = 1e-8
    levels: int = 4
    h0: float = 0.168
    gradient_mode: str = "exact"
    update_mode: str = "safeguarded"
    explicit_tikhonov: bool = False
    max_halvings: int = 8
    gamma_min: float = 0.1
    omega: str = "omega"
    sector: str | None = "neumann"
    data_scaling: str = "alpha"
    seed: int = 0

    def __post_init__(self):
        if self.step <= 0:
            raise ReconstructionError("step length must be positive")
        if self.tol <= 0:
            raise ReconstructionError("TOL must be positive")
        if self.l > self.k or self.l not in (1, 2) or self.k not in (1, 2):
            raise ReconstructionError(f"unsupported orders k={self.k}, l={self.l}")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ReconstructionError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if self.update_mode not in UPDATE_MODES:
            raise ReconstructionError(f"update_mode must be one of {UPDATE_MODES}")
        if not self.boundary_data:
            raise ReconstructionError("at least one dataset is required")
        if self.gamma0 < self.gamma_min:
            raise ReconstructionError("initial coefficient below the positivity floor")


@dataclass(eq=False)
class Evaluation:
    objective: float
    components: dict
    states: list  # (u, sigma, z) per dataset


@dataclass(eq=False)
class ReconState:
    gamma: CoefficientField
    level: int = 0
    log: list = field(default_factory=list)
    evaluation: Evaluation | None = None


class LevelProblem:
    """Everything needed to evaluate and differentiate the reduced objective on one mesh."""

    def __init__(self, mesh, datasets, cfg: ReconConfig, solver=None):
        self.mesh = mesh
        self.datasets = datasets
        self.cfg = cfg
        self.h = mesh_size(mesh)
        self.beta = cfg.beta0 * self.h ** (2 * cfg.k)
        self.spaces = saddle_spaces(mesh, cfg.k)
        self.G = FunctionSpace(mesh, "CG", cfg.l)
        self.solver = solver if solver is not None else ReusableSolver()
        self.w = quadrature_weights(mesh)
        self.w_omega = self.w * mesh.region_mask(cfg.omega)[:, None]
        self.flux_matrix = boundary_flux_matrix(self.spaces[1], weight=self.beta)
        self.tikhonov_matrix = stiffness_matrix(self.G, self.h)
        S, _ = assemble_gradient_smoother(mesh, cfg.l, self.h)
        self.smoother = Factorization(S)
        self.mass = mass_matrix(self.G)

    def field(self, nodal):
        return CoefficientField(self.G.function(np.asarray(nodal, dtype=float)), self.cfg.gamma_min)

    def solve_states(self, gamma):
        cfg = self.cfg
        data = [(d.q, d.f, d.flux) for d in self.datasets]
        systems = assemble_saddle_multi(self.mesh, gamma, cfg.alpha, self.beta, data, cfg.k, cfg.omega,
                                        cfg.gamma_min, cfg.data_scaling, self.spaces)
        V, RT, X = self.spaces
        states = []
        groups = {}
        for i, s in enumerate(systems):
            groups.setdefault(id(s.matrix), []).append(i)
        sols = [None] * len(systems)
        for idx in groups.values():
            A = systems[idx[0]].matrix
            res = self.solver.solve(A, [systems[i].rhs for i in idx])
            for i, (x, _) in zip(idx, res):
                sols[i] = systems[i].expand(x)
        for s, x in zip(systems, sols):
            u, sg, z = s.split(x)
            states.append((V.function(u.copy()), RT.function(sg.copy()), X.function(z.copy())))
        return states

    def evaluate(self, gamma, states=None):
        return eval_objective(self, gamma, self.solve_states(gamma) if states is None else states)


# ---------------------------------------------------------------------------
# objective and gradient


def eval_objective(problem: LevelProblem, gamma, states):
    """Reduced objective with its components.

    ``mismatch``, ``data`` and ``flux`` are summed over datasets; ``tikhonov``
    is ``1/2 h ||grad gamma||^2``; ``constraint`` is the (vanishing)
    multiplier term ``|(div sigma + f, z)|`` kept as a diagnostic.  The
    returned ``objective`` includes the Tikhonov term only when the
    configuration asks for the explicit treatment.
    """
    cfg = problem.cfg
    gq = coefficient_qp(problem.mesh, gamma)
    comp = {"mismatch": 0.0, "data": 0.0, "flux": 0.0, "constraint": 0.0}
    for d, (u, s, z) in zip(problem.datasets, states):
        gu = u.derivs_qp()
        sv = s.values_qp()
        mis = gq[..., None] * gu - sv
        comp["mismatch"] += 0.5 * float(np.sum(problem.w * np.sum(mis ** 2, axis=-1) / gq))
        if d.q is not None:
            comp["data"] += 0.5 * cfg.alpha * float(np.sum(problem.w_omega * (u.values_qp() - d.q) ** 2))
        comp["flux"] += 0.5 * float(s.coef @ (problem.flux_matrix @ s.coef))
        fq = 0.0 if d.f is None else np.asarray(d.f(*np.moveaxis(quadrature_points(problem.mesh), -1, 0))
                                                if callable(d.f) else d.f, dtype=float)
        comp["constraint"] += abs(float(np.sum(problem.w * (s.derivs_qp() + fq) * z.values_qp())))
    nod = gamma.nodal
    comp["tikhonov"] = 0.5 * float(nod @ (problem.tikhonov_matrix @ nod))
    total = comp["mismatch"] + comp["data"] + comp["flux"]
    if cfg.explicit_tikhonov:
        total += comp["tikhonov"]
    if not np.isfinite(total):
        raise ReconstructionError("objective is not finite")
    return Evaluation(total, comp, states)


def gradient_integrand(states, gamma_qp, mode="exact"):
    """Pointwise gamma-derivative integrand at quadrature points, summed over datasets.

    ``exact``: ``1/2 (|grad u|^2 - gamma^-2 |sigma|^2)``;
    ``literal``: ``|grad u|^2 - gamma^-1 |sigma|^2``.
    """
    if mode not in GRADIENT_MODES:
        raise ReconstructionError(f"unknown gradient mode {mode!r}")
    G = np.zeros_like(gamma_qp)
    for u, s, _ in states:
        gu2 = np.sum(u.derivs_qp() ** 2, axis=-1)
        s2 = np.sum(s.values_qp() ** 2, axis=-1)
        G += 0.5 * (gu2 - s2 / gamma_qp ** 2) if mode == "exact" else gu2 - s2 / gamma_qp
    return G


def gradient_vector(problem: LevelProblem, gamma, states, mode=None, explicit_tikhonov=None):
    """Dual vector ``<dL/dgamma, phi_i>`` for every basis function of the coefficient space."""
    cfg = problem.cfg
    mode = cfg.gradient_mode if mode is None else mode
    explicit = cfg.explicit_tikhonov if explicit_tikhonov is None else explicit_tikhonov
    G = gradient_integrand(states, coefficient_qp(problem.mesh, gamma), mode)
    r = load_vector(problem.G, G)
    if explicit:
        r = r + problem.tikhonov_matrix @ gamma.nodal
    return r


def smoothed_gradient(problem: LevelProblem, rhs):
    """Solve ``(g, v) + (h grad g, grad v) = rhs(v)``; returns nodal ``g`` and ``||g||_Omega``."""
    g, _ = problem.smoother.solve(rhs, tol=1e-10)
    return g, float(np.sqrt(max(g @ (problem.mass @ g), 0.0)))


def descent_step(problem: LevelProblem, state: ReconState, g, s):
    """Update ``state`` in place; returns the accepted step (0.0 if rejected)."""
    cfg = problem.cfg
    cur = state.evaluation
    if not np.any(g):
        return 0.0
    if cfg.update_mode == "literal":
        trial = problem.field(np.maximum(state.gamma.nodal + s * g, cfg.gamma_min))
        state.gamma, state.evaluation = trial, problem.evaluate(trial)
        return s
    step = s
    for _ in range(cfg.max_halvings + 1):
        trial = problem.field(np.maximum(state.gamma.nodal - step * g, cfg.gamma_min))
        ev = problem.evaluate(trial)
        if ev.objective < cur.objective:
            state.gamma, state.evaluation = trial, ev
            return step
        step *= 0.5
    log.info("level %d: no decrease after %d halvings; step rejected", state.level, cfg.max_halvings)
    return 0.0


# ---------------------------------------------------------------------------
# driver


@dataclass
class LevelResult:
    level: int
    h: float
    mesh: object
    gamma: CoefficientField
    iterations: int
    objective: float
    grad_norm: float
    gamma_err_l2: float
    n_factorizations: int
    seconds: float


@dataclass
class ReconResult:
    config: ReconConfig
    levels: list = field(default_factory=list)
    log: list = field(default_factory=list)
    initial_error: float = float("nan")

    LOG_COLUMNS = ("level", "iter", "objective", "grad_norm", "step", "gamma_err_l2")
    LEVEL_COLUMNS = ("level", "h", "iterations", "objective", "grad_norm", "gamma_err_l2", "n_factorizations")

    def log_csv(self, path=None):
        return _csv(self.LOG_COLUMNS, self.log, path)

    def levels_csv(self, path=None):
        rows = [{c: getattr(r, c) for c in self.LEVEL_COLUMNS} for r in self.levels]
        return _csv(self.LEVEL_COLUMNS, rows, path)

    def errors(self):
        return np.array([r.gamma_err_l2 for r in self.levels])

    def hs(self):
        return np.array([r.h for r in self.levels])


def _csv(columns, rows, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([str(int(r[c])) if isinstance(r[c], (int, np.integer)) else repr(float(r[c])) for c in columns])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def run_level(problem: LevelProblem, gamma, level, gamma_true=None, on_iter=None):
    """Algorithm loop on one mesh: solve, gradient, smoothed direction, step; returns (state, rows)."""
    cfg = problem.cfg
    state = ReconState(gamma, level)
    state.evaluation = problem.evaluate(gamma)
    rows = []
    err = _gamma_error(gamma, gamma_true)
    gnorm = float("nan")
    it = 0
    for it in range(1, cfg.max_iter + 1):
        r = gradient_vector(problem, state.gamma, state.evaluation.states)
        g, gnorm = smoothed_gradient(problem, r)
        if gnorm <= cfg.tol:
            rows.append(_log_row(level, it, state.evaluation.objective, gnorm, 0.0, err))
            break
        prev = state.evaluation.objective
        step = descent_step(problem, state, g, cfg.step)
        err = _gamma_error(state.gamma, gamma_true)
        rows.append(_log_row(level, it, state.evaluation.objective, gnorm, step, err))
        if on_iter is not None:
            on_iter(rows[-1])
        if cfg.update_mode == "safeguarded":
            if state.evaluation.objective > prev:
                raise ReconstructionError("safeguarded descent increased the objective")
            if step == 0.0:
                break
        if state.gamma.min() < cfg.gamma_min:
            raise ReconstructionError("coefficient fell below the floor")
    state.log = rows
    return state, rows, it, gnorm


def _log_row(level, it, obj, gnorm, step, err):
    return {"level": level, "iter": it, "objective": obj, "grad_norm": gnorm, "step": step, "gamma_err_l2": err}


def _gamma_error(gamma, gamma_true):
    if gamma_true is None:
        return float("nan")
    return error_norms(gamma.function, gamma_true)[0]


def interpolate_coefficient(gamma: CoefficientField, mesh, order=None):
    """Nodal interpolation of a coefficient onto another (typically refined) mesh."""
    order = gamma.space.order if order is None else order
    return CoefficientField.interpolate(mesh, FeField(gamma.function), order, gamma.floor)


def reconstruct(cfg: ReconConfig, base_mesh=None, sources=None, on_iter=None):
    """Multi-level reconstruction; returns a :class:`ReconResult`."""
    base = disc_study_mesh(cfg.h0) if base_mesh is None else base_mesh
    meshes = [base]
    for _ in range(cfg.levels - 1):
        meshes.append(refine_uniform(meshes[-1]))
    gamma_true = lookup(cfg.gamma_true) if isinstance(cfg.gamma_true, str) else cfg.gamma_true
    if sources is None:
        sources = manufacture_sources(meshes[-1], gamma_true, cfg.boundary_data)
    result = ReconResult(cfg)
    gamma = CoefficientField.constant(base, cfg.gamma0, cfg.l, cfg.gamma_min)
    result.initial_error = _gamma_error(gamma, gamma_true)
    for lev, mesh in enumerate(meshes):
        t0 = time.perf_counter()
        if lev:
            gamma = interpolate_coefficient(gamma, mesh)
        datasets = [s.sample(mesh, cfg.omega, cfg.sector) for s in sources]
        problem = LevelProblem(mesh, datasets, cfg)
        state, rows, its, gnorm = run_level(problem, gamma, lev, gamma_true, on_iter)
        gamma = state.gamma
        result.log.extend(rows)
        result.levels.append(LevelResult(lev, problem.h, mesh, gamma, its, state.evaluation.objective, gnorm,
                                         _gamma_error(gamma, gamma_true), problem.solver.n_factorizations,
                                         time.perf_counter() - t0))
        log.info("level %d: h=%.4g err=%.4g objective=%.4g (%d its, %d factorisations, %.1fs)", lev, problem.h,
                 result.levels[-1].gamma_err_l2, state.evaluation.objective, its, problem.solver.n_factorizations,
                 result.levels[-1].seconds)
    return result


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class FdCheck:
    analytic: float
    rows: list  # (eps, finite difference, relative error)

    @property
    def best(self):
        return min(r[2] for r in self.rows) if self.rows else float("nan")


def fd_gradient_check(problem: LevelProblem, gamma, direction, eps=(1e-3, 1e-4, 1e-5, 1e-6), mode="exact",
                      explicit_tikhonov=True):
    """Compare ``<dL/dgamma, v>`` with central differences of the reduced objective.

    The objective is re-solved for every perturbed coefficient with a fresh
    factorisation.  ``direction`` holds nodal values of ``v`` in the
    coefficient space.
    """
    v = np.asarray(direction, dtype=float)
    saved = problem.cfg
    problem.cfg = dataclasses.replace(saved, explicit_tikhonov=explicit_tikhonov, gradient_mode=mode)
    try:
        ev = eval_objective(problem, gamma, _fresh_states(problem, gamma))
        an = float(gradient_vector(problem, gamma, ev.states) @ v)
        rows = []
        for e in eps:
            lp = eval_objective(problem, problem.field(gamma.nodal + e * v),
                                _fresh_states(problem, problem.field(gamma.nodal + e * v))).objective
            lm = eval_objective(problem, problem.field(gamma.nodal - e * v),
                                _fresh_states(problem, problem.field(gamma.nodal - e * v))).objective
            fd = (lp - lm) / (2 * e)
            scale = max(abs(an), abs(fd))
            rel = abs(fd - an) / scale if scale > 0 else 0.0
            rows.append((e, fd, rel))
        return FdCheck(an, rows)
    finally:
        problem.cfg = saved


def _fresh_states(problem, gamma):
    keep = problem.solver
    problem.solver = ReusableSolver()
    try:
        return problem.solve_states(gamma)
    finally:
        problem.solver = keep


# ---------------------------------------------------------------------------
# gamma dumps


def write_gamma(gamma: CoefficientField, path):
    with open(path, "w") as fh:
        fh.write(f"gamma {gamma.space.ndof}\n")
        for v in gamma.nodal.tolist():
            fh.write(f"{v!r}\n")


def read_gamma(path):
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 2 or head[0] != "gamma":
            raise ReconstructionError(f"{path}: expected 'gamma <ndof>' header")
        vals = np.array([float(line) for line in fh if line.strip()])
    if len(vals) != int(head[1]):
        raise ReconstructionError(f"{path}: header announces {head[1]} values, found {len(vals)}")
    return vals


__all__ = [
    "DataSource", "Dataset", "ReconConfig", "ReconState", "Evaluation", "LevelProblem", "ReconResult",
    "LevelResult", "FdCheck", "manufacture_sources", "eval_objective", "gradient_integrand", "gradient_vector",
    "smoothed_gradient", "descent_step", "run_level", "reconstruct", "fd_gradient_check",
    "interpolate_coefficient", "write_gamma", "read_gamma",
]
