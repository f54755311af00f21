"""Unique continuation from interior data: solves, noise injection, convergence studies and rate fits."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .fem import (CoefficientField, assemble_saddle, error_norms, function_qp, quadrature_weights, saddle_spaces,
                  triple_norm)
from .fields import Constant, FeField, Flux, lookup
from .mesh import mesh_size, refine_uniform
from .solver import FieldTriple, forward_dirichlet, lu_solve

log = logging.getLogger(__name__)


class ContinuationError(ValueError):
    pass


@dataclass(frozen=True)
class BetaSchedule:
    """``beta = beta0 * max(h, h0)^exponent``; the exponent defaults to ``2k``."""

    beta0: float = 1e-3
    exponent: float | None = None
    h0: float = 0.0

    def __call__(self, h, k):
        p = 2 * k if self.exponent is None else self.exponent
        return self.beta0 * max(h, self.h0) ** p


@dataclass(frozen=True)
class PerturbationSpec:
    """Uniform noise amplitudes: ``dq`` on the data, ``df`` on the source, ``dgamma`` relative on the coefficient."""

    dq: float = 0.0
    df: float = 0.0
    dgamma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.dq, self.df, self.dgamma) < 0:
            raise ContinuationError("noise amplitudes must be non-negative")

    @property
    def active(self):
        return self.dq > 0 or self.df > 0 or self.dgamma > 0


@dataclass(frozen=True)
class UcProblem:
    """Data and parameters of one continuation solve.

    ``gamma``, ``q`` and ``f`` may be scalars, catalogue fields/callables, or
    arrays already sampled at the triangle quadrature points of ``mesh``.
    """

    mesh: object
    q: object
    gamma: object = 1.0
    f: object = None
    alpha: float = 1000.0
    k: int = 1
    beta: BetaSchedule = field(default_factory=BetaSchedule)
    noise: PerturbationSpec = field(default_factory=PerturbationSpec)
    omega: str = "omega"
    data_scaling: str = "alpha"
    gamma_min: float = 0.1
    level: int = 0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ContinuationError(f"alpha must be positive, got {self.alpha}")
        if self.beta.beta0 < 0:
            raise ContinuationError(f"beta0 must be non-negative, got {self.beta.beta0}")
        if self.k not in (1, 2):
            raise ContinuationError(f"k must be 1 or 2, got {self.k}")

    def on_mesh(self, mesh, level=None):
        return dataclasses.replace(self, mesh=mesh, level=self.level if level is None else level)


@dataclass(eq=False)
class UcSolution(FieldTriple):
    h: float = 0.0
    beta: float = 0.0
    noise: dict = field(default_factory=dict)


def _sample(mesh, v):
    if isinstance(v, str):
        v = lookup(v)
    return function_qp(mesh, v)


def perturb_data(problem: UcProblem, spec: PerturbationSpec | None = None):
    """Return ``(perturbed problem, realised noise)``.

    Noise is drawn independently per triangle, uniform in ``[-a, a]``, and is
    constant on each triangle; ``dgamma`` perturbs the nodal values of a P1
    coefficient by the factor ``1 + U``.  The generator is seeded by
    ``(seed, level)`` so each mesh level gets its own reproducible stream.
    The report holds the realised norms and the combined
    ``alpha^1/2 ||dq||_omega + ||df|| + dgamma ||grad u||`` (the last term
    only when a reference is supplied later, so it is left out here).
    """
    spec = problem.noise if spec is None else spec
    mesh = problem.mesh
    w = quadrature_weights(mesh)
    report = {"dq_norm": 0.0, "df_norm": 0.0, "gamma_clamped": 0, "delta": 0.0}
    if not spec.active:
        return problem, report
    rng = np.random.default_rng([spec.seed, problem.level])
    nt = mesh.n_triangles
    noise_q = rng.uniform(-1.0, 1.0, nt) * spec.dq
    noise_f = rng.uniform(-1.0, 1.0, nt) * spec.df
    q = _sample(mesh, problem.q) + noise_q[:, None]
    f = _sample(mesh, problem.f) + noise_f[:, None]
    om = mesh.region_mask(problem.omega)[:, None]
    report["dq_norm"] = float(np.sqrt(np.sum(w * om * noise_q[:, None] ** 2)))
    report["df_norm"] = float(np.sqrt(np.sum(w * noise_f[:, None] ** 2)))
    gamma = problem.gamma
    if spec.dgamma > 0:
        g = CoefficientField.interpolate(mesh, _as_callable(gamma), order=1, floor=problem.gamma_min)
        nodal = g.nodal * (1.0 + spec.dgamma * rng.uniform(-1.0, 1.0, g.space.ndof))
        report["gamma_clamped"] = int(np.count_nonzero(nodal < problem.gamma_min))
        if report["gamma_clamped"]:
            log.warning("perturbed coefficient clamped at %d nodes", report["gamma_clamped"])
        gamma = g.with_nodal(np.maximum(nodal, problem.gamma_min))
    report["delta"] = np.sqrt(problem.alpha) * report["dq_norm"] + report["df_norm"]
    return dataclasses.replace(problem, q=q, f=f, gamma=gamma), report


def _as_callable(gamma):
    if isinstance(gamma, str):
        return lookup(gamma)
    if callable(gamma):
        return gamma
    return Constant(float(gamma))


def _resolve(v):
    return lookup(v) if isinstance(v, str) else v


def solve_uc(problem: UcProblem, solver=None):
    """Assemble and solve the continuation system; noise is applied first if configured."""
    mesh = problem.mesh
    h = mesh_size(mesh)
    pert, report = perturb_data(problem)
    sched = problem.beta
    if problem.noise.active and sched.h0 == 0.0:
        # noise-aware floor h0 = delta^(1/k), taking the solution-size factor as 1
        sched = dataclasses.replace(sched, h0=report["delta"] ** (1.0 / problem.k))
    beta = sched(h, problem.k)
    spaces = saddle_spaces(mesh, problem.k)
    system = assemble_saddle(mesh, _resolve(pert.gamma), pert.alpha, beta, q=_resolve(pert.q), f=_resolve(pert.f),
                             k=problem.k, omega=problem.omega, gamma_min=problem.gamma_min,
                             data_scaling=problem.data_scaling, spaces=spaces)
    if solver is None:
        x, res = lu_solve(system)
    else:
        xf, res = solver.solve(system.matrix, system.rhs)
        x = system.expand(xf)
    u, s, z = system.split(x)
    V, RT, X = spaces
    report["h0"] = sched.h0
    log.info("level %d: h=%.4g beta=%.3g dofs=%d residual=%.2e", problem.level, h, beta, system.n_full, res)
    return UcSolution(V.function(u.copy()), RT.function(s.copy()), X.function(z.copy()), res, h, beta, report)


@dataclass(frozen=True)
class Reference:
    """Reference solution with its flux ``gamma grad u`` (and ``div = -f``)."""

    u: object
    sigma: object
    description: str = ""


def make_reference(spec, finest_mesh=None, gamma=1.0, f=None, levels_beyond=2):
    """Reference field for error measurement.

    ``spec`` is a catalogue field (analytic solution, used directly with its
    flux for constant ``gamma``) or a ``("forward", boundary_data)`` recipe:
    then the Dirichlet problem is solved with P2 elements on ``finest_mesh``
    refined ``levels_beyond`` times.
    """
    if isinstance(spec, tuple) and spec and spec[0] == "forward":
        if finest_mesh is None:
            raise ContinuationError("a forward-solve reference needs the finest study mesh")
        m = finest_mesh
        for _ in range(levels_beyond):
            m = refine_uniform(m)
        g = _as_callable(gamma)
        uh = forward_dirichlet(m, g, f=_resolve(f), g=_resolve(spec[1]), k=2)
        u = FeField(uh)
        return Reference(u, Flux(u, g if hasattr(g, "grad") else Constant(float(gamma))),
                         f"P2 forward solve on {m.n_triangles} triangles")
    u = _resolve(spec)
    g = _as_callable(gamma)
    if not hasattr(g, "grad"):
        raise ContinuationError("analytic references need a catalogue coefficient with a gradient")
    return Reference(u, Flux(u, g), f"analytic {u!r}")


CORE_COLUMNS = ["level", "h", "ndof_u", "ndof_sigma", "ndof_z", "err_l2_Omin", "err_l2_B", "err_h1_B", "tn_total"]
EXTRA_COLUMNS = ["err_l2_omega", "err_l2_Omega", "err_h1_Omega", "err_l2_sigma", "tn_h1", "tn_omega",
                 "tn_mismatch", "tn_z_1h", "tn_boundary_flux", "tn_div", "beta", "residual", "delta"]


@dataclass
class ConvergenceTable:
    rows: list = field(default_factory=list)
    columns: list = field(default_factory=lambda: CORE_COLUMNS + EXTRA_COLUMNS)
    meta: dict = field(default_factory=dict)

    def append(self, row):
        if self.rows and not row["h"] < self.rows[-1]["h"]:
            raise ContinuationError("mesh sizes must strictly decrease across levels")
        missing = set(self.columns) - set(row)
        if missing:
            raise ContinuationError(f"row lacks columns {sorted(missing)}")
        self.rows.append(row)

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in self.columns])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def run_convergence_study(base_mesh, levels, template: UcProblem, reference: Reference, solver=None):
    """Solve ``template`` on ``base_mesh`` and ``levels - 1`` uniform refinements and tabulate errors."""
    if levels < 1:
        raise ContinuationError("at least one level is required")
    table = ConvergenceTable(meta={"k": template.k, "alpha": template.alpha, "beta0": template.beta.beta0})
    mesh = base_mesh
    for lev in range(levels):
        if lev:
            mesh = refine_uniform(mesh)
        sol = solve_uc(template.on_mesh(mesh, lev), solver)
        table.append(_row(lev, mesh, sol, template, reference))
    return table


def _row(level, mesh, sol, problem, ref):
    e_omin, _ = error_norms(sol.u, ref.u, "omega_minus")
    e_b, e_b1 = error_norms(sol.u, ref.u, "B")
    e_om, _ = error_norms(sol.u, ref.u, problem.omega)
    e_all, e_all1 = error_norms(sol.u, ref.u)
    e_sig, _ = error_norms(sol.sigma, ref.sigma)
    gamma = _as_callable(problem.gamma)
    tn = triple_norm(sol.u, sol.sigma, sol.z, problem.alpha, sol.beta, gamma, ref.u, ref.sigma, problem.omega)
    return {
        "level": level, "h": sol.h, "ndof_u": sol.u.space.ndof, "ndof_sigma": sol.sigma.space.ndof,
        "ndof_z": sol.z.space.ndof, "err_l2_Omin": e_omin, "err_l2_B": e_b, "err_h1_B": e_b1,
        "tn_total": tn["total"], "err_l2_omega": e_om, "err_l2_Omega": e_all, "err_h1_Omega": e_all1,
        "err_l2_sigma": e_sig, "tn_h1": tn["h1"], "tn_omega": tn["omega"], "tn_mismatch": tn["mismatch"],
        "tn_z_1h": tn["z_1h"], "tn_boundary_flux": tn["boundary_flux"], "tn_div": tn["div"],
        "beta": sol.beta, "residual": sol.residual, "delta": sol.noise.get("delta", 0.0),
    }


@dataclass(frozen=True)
class PowerFit:
    rate: float
    constant: float
    residual: float


@dataclass(frozen=True)
class LogFit:
    c: float
    residual: float
    free_exponent: float
    free_constant: float


def _hx(table_or_h, metric):
    if isinstance(table_or_h, ConvergenceTable):
        return table_or_h.column("h"), table_or_h.column(metric)
    h, e = table_or_h
    return np.asarray(h, dtype=float), np.asarray(e, dtype=float)


def fit_power_rate(table, metric="err_l2_Omin"):
    """Least-squares fit ``e = C h^r`` in log-log space.

    ``table`` is a :class:`ConvergenceTable` or an ``(h, errors)`` pair.
    """
    h, e = _hx(table, metric)
    if len(h) < 3:
        raise ContinuationError("rate fits need at least three levels")
    if np.any(e <= 0) or np.any(h <= 0):
        raise ContinuationError(f"non-positive values in {metric!r}; cannot fit a power law")
    A = np.stack([np.log(h), np.ones_like(h)], axis=1)
    (r, lc), *_ = np.linalg.lstsq(A, np.log(e), rcond=None)
    res = float(np.linalg.norm(A @ np.array([r, lc]) - np.log(e)))
    return PowerFit(float(r), float(np.exp(lc)), res)


def fit_log_rate(table, metric="gamma_err_l2"):
    """Least-squares ``c`` in ``e = c |log h|^{-1/2}``, plus a free-exponent fit ``e = c' |log h|^p``."""
    h, e = _hx(table, metric)
    if len(h) < 3:
        raise ContinuationError("rate fits need at least three levels")
    if np.any(h <= 0) or np.any(h >= 1):
        raise ContinuationError("logarithmic fits need 0 < h < 1")
    L = np.abs(np.log(h)) ** -0.5
    c = float(L @ e / (L @ L))
    res = float(np.linalg.norm(e - c * L))
    if np.any(e <= 0):
        return LogFit(c, res, float("nan"), float("nan"))
    A = np.stack([np.log(np.abs(np.log(h))), np.ones_like(h)], axis=1)
    (p, lc), *_ = np.linalg.lstsq(A, np.log(e), rcond=None)
    return LogFit(c, res, float(p), float(np.exp(lc)))


def uc_template(k=1, alpha=1000.0, beta0=1e-3, solution="r3sin3t", noise=None):
    """The disc continuation experiment: gamma = 1, harmonic data restricted to omega."""
    u = lookup(solution)
    return UcProblem(mesh=None, q=u, gamma=1.0, f=None, alpha=alpha, k=k, beta=BetaSchedule(beta0),
                     noise=noise or PerturbationSpec())

