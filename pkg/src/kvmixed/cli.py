"""Command-line front end for the continuation and reconstruction experiments.

Usage::

    kvmixed <subcommand> [--config FILE] [--key value ...] [--out DIR]

Configuration files use ``key = value`` lines grouped in sections named after
the subcommand (``[uc-convergence]``, ``[reconstruct]``, ...) plus an
optional ``[common]`` section.  Command-line flags override file values.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import os
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .continuation import (BetaSchedule, PerturbationSpec, UcProblem, fit_log_rate, fit_power_rate, make_reference,
                           run_convergence_study)
from .fields import FieldError, lookup
from .mesh import (disc_study_mesh, euler_characteristic, mesh_size, refine_uniform, unit_square_mesh, validate,
                   write_mesh)
from .reconstruction import (LevelProblem, ReconConfig, fd_gradient_check, manufacture_sources, reconstruct,
                             write_gamma)
from .solver import forward_dirichlet

log = logging.getLogger("kvmixed")

OUT_ENV = "KVMIXED_OUT"
DEFAULT_OUT = "kvmixed-out"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# parameter schema


@dataclass(frozen=True)
class Param:
    kind: str  # int, float, bool, str, field, fields, choice
    default: object
    help: str
    low: float | None = None
    high: float | None = None
    low_open: bool = False
    choices: tuple = ()


def _p(kind, default, help, low=None, high=None, low_open=False, choices=()):
    return Param(kind, default, help, low, high, low_open, tuple(choices))


COMMON = {
    "seed": _p("int", 0, "random seed for noise and random directions", 0),
    "log_level": _p("choice", "info", "logging verbosity", choices=("debug", "info", "warning", "error")),
}

SCHEMA = {
    "uc-convergence": {
        "k": _p("choice", "1", "polynomial order of the primal space (1 or 2)", choices=("1", "2")),
        "alpha": _p("float", 1000.0, "data penalty alpha", 0.0, low_open=True),
        "beta0": _p("float", 1e-3, "Robin penalty prefactor: beta = beta0 * max(h, h0)^(2k)", 0.0),
        "levels": _p("int", 4, "number of mesh levels", 1, 8),
        "h0": _p("float", 0.17, "target mesh size of the coarsest disc mesh", 0.0, 2.0, low_open=True),
        "solution": _p("field", "r3sin3t", "exact harmonic solution (catalogue name)"),
        "noise_dq": _p("float", 0.0, "uniform noise amplitude on the interior data", 0.0),
        "noise_df": _p("float", 0.0, "uniform noise amplitude on the source", 0.0),
        "noise_dgamma": _p("float", 0.0, "relative uniform noise amplitude on the coefficient", 0.0, 1.0),
        "data_scaling": _p("choice", "alpha", "rhs data term: alpha (q,v) or literal (q,v)",
                           choices=("alpha", "literal")),
    },
    "reconstruct": {
        "k": _p("choice", "2", "state polynomial order (1 or 2)", choices=("1", "2")),
        "l": _p("choice", "1", "coefficient polynomial order", choices=("1", "2")),
        "alpha": _p("float", 1000.0, "data penalty alpha", 0.0, low_open=True),
        "beta0": _p("float", 1e-3, "Robin penalty prefactor", 0.0),
        "step": _p("float", 0.8, "step length s", 0.0, low_open=True),
        "max_iter": _p("int", 100, "descent iterations per level", 1),
        "tol": _p("float", 1e-8, "stop when the smoothed gradient norm is below TOL", 0.0, low_open=True),
        "levels": _p("int", 4, "number of mesh levels", 1, 8),
        "h0": _p("float", 0.168, "target mesh size of the coarsest disc mesh", 0.0, 2.0, low_open=True),
        "gamma_true": _p("field", "bump", "coefficient generating the data (catalogue name)"),
        "gamma0": _p("float", 1.0, "constant initial coefficient", 0.0, low_open=True),
        "datasets": _p("fields", "trig(2,1); trig(3,2)", "';'-separated Dirichlet data of the datasets"),
        "gradient_mode": _p("choice", "exact", "gradient integrand", choices=("exact", "literal")),
        "update_mode": _p("choice", "safeguarded", "coefficient update rule", choices=("safeguarded", "literal")),
        "explicit_tikhonov": _p("bool", False, "add the Tikhonov gradient explicitly"),
        "gamma_min": _p("float", 0.1, "positivity floor of the coefficient", 0.0, low_open=True),
        "sector": _p("choice", "neumann", "boundary tag carrying flux data, or none", choices=("neumann", "none")),
    },
    "forward": {
        "geometry": _p("choice", "disc", "domain", choices=("disc", "square")),
        "h0": _p("float", 0.17, "target mesh size (disc)", 0.0, 2.0, low_open=True),
        "n": _p("int", 8, "subdivisions per side (square)", 1),
        "levels": _p("int", 1, "number of uniform refinements + 1", 1, 8),
        "k": _p("choice", "1", "polynomial order", choices=("1", "2")),
        "gamma": _p("field", "one", "diffusion coefficient"),
        "g": _p("field", "r3sin3t", "Dirichlet data"),
    },
    "mesh-info": {
        "geometry": _p("choice", "square", "domain", choices=("disc", "square")),
        "h0": _p("float", 0.17, "target mesh size (disc)", 0.0, 2.0, low_open=True),
        "n": _p("int", 2, "subdivisions per side (square)", 1),
        "levels": _p("int", 1, "number of uniform refinements + 1", 1, 8),
    },
    "gradient-check": {
        "h0": _p("float", 0.5, "target mesh size of the disc mesh", 0.0, 2.0, low_open=True),
        "k": _p("choice", "2", "state polynomial order", choices=("1", "2")),
        "l": _p("choice", "1", "coefficient polynomial order", choices=("1", "2")),
        "alpha": _p("float", 1000.0, "data penalty alpha", 0.0, low_open=True),
        "beta0": _p("float", 1e-3, "Robin penalty prefactor", 0.0),
        "gamma_true": _p("field", "bump", "coefficient generating the data"),
        "datasets": _p("fields", "trig(2,1); trig(3,2)", "';'-separated Dirichlet data"),
        "directions": _p("int", 3, "number of random directions", 1),
        "gradient_mode": _p("choice", "exact", "gradient integrand", choices=("exact", "literal")),
        "explicit_tikhonov": _p("bool", True, "include the Tikhonov gradient"),
    },
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key, p: Param, raw, where):
    text = str(raw).strip()
    try:
        if p.kind == "int":
            if not re.fullmatch(r"[+-]?\d+", text):
                raise ValueError
            v = int(text)
        elif p.kind == "float":
            v = float(text)
            if not np.isfinite(v):
                raise ValueError
        elif p.kind == "bool":
            low = text.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError
            v = low in _TRUE
        elif p.kind == "choice":
            if text not in p.choices:
                raise ConfigError(f"{where}: {key} must be one of {', '.join(p.choices)}, got {text!r}")
            v = text
        elif p.kind == "field":
            lookup(text)
            v = text
        elif p.kind == "fields":
            v = tuple(s.strip() for s in text.split(";") if s.strip())
            for s in v:
                lookup(s)
        else:
            v = text
    except ConfigError:
        raise
    except FieldError as exc:
        raise ConfigError(f"{where}: {key}: {exc}") from None
    except ValueError:
        raise ConfigError(f"{where}: {key} expects {p.kind}, got {text!r}") from None
    if p.kind in ("int", "float"):
        if p.low is not None and (v < p.low or (p.low_open and v == p.low)):
            raise ConfigError(f"{where}: {key} = {v} out of range (must be {'>' if p.low_open else '>='} {p.low})")
        if p.high is not None and v > p.high:
            raise ConfigError(f"{where}: {key} = {v} out of range (must be <= {p.high})")
    return v


@dataclass
class RunConfig:
    kind: str
    values: dict
    out: Path
    sources: dict = field(default_factory=dict)  # key -> where the value came from

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None


def _line_numbers(text):
    """Map (section, key) -> 1-based line number in a config file."""
    out = {}
    section = None
    for i, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.fullmatch(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
        elif s and not s.startswith(("#", ";")) and section is not None:
            key = re.split(r"[=:]", s, maxsplit=1)[0].strip().lower()
            out[(section, key)] = i
    return out


def parse_config(kind, path=None, overrides=None, out=None):
    """Resolve defaults, an optional config file and flag overrides into a :class:`RunConfig`."""
    if kind not in SCHEMA:
        raise ConfigError(f"unknown subcommand {kind!r}")
    schema = {**COMMON, **SCHEMA[kind]}
    values = {k: p.default for k, p in schema.items()}
    sources = {k: "default" for k in schema}
    for k, p in schema.items():
        if p.kind == "fields" and isinstance(values[k], str):
            values[k] = _convert(k, p, values[k], "default")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        text = path.read_text()
        lines = _line_numbers(text)
        cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
        try:
            cp.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in cp.sections():
            if section != "common" and section not in SCHEMA:
                raise ConfigError(f"{path}:{lines.get((section, ''), '?')}: unknown section [{section}]")
            if section not in ("common", kind):
                continue
            for key, raw in cp.items(section):
                where = f"{path}:{lines.get((section, key), '?')}"
                allowed = COMMON if section == "common" else schema
                if key not in allowed:
                    raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
                values[key] = _convert(key, schema[key], raw, where)
                sources[key] = where
    for key, raw in (overrides or {}).items():
        key = key.replace("-", "_")
        if key not in schema:
            raise ConfigError(f"--{key}: unknown key for {kind}")
        values[key] = _convert(key, schema[key], raw, f"--{key.replace('_', '-')}")
        sources[key] = "flag"
    if kind in ("reconstruct", "gradient-check") and not values["datasets"]:
        raise ConfigError("datasets: at least one dataset is required")
    if kind == "reconstruct" and int(values["l"]) > int(values["k"]):
        raise ConfigError("l: coefficient order must not exceed k")
    out = Path(out if out is not None else os.environ.get(OUT_ENV, DEFAULT_OUT))
    return RunConfig(kind, values, out, sources)


# ---------------------------------------------------------------------------
# plot scripts (emitted as text; they need matplotlib at run time only)

UC_PLOT = '''"""Log-log plot of the local L2 error against h, with reference slopes."""
import csv
import matplotlib.pyplot as plt

rows = list(csv.DictReader(open("{csv}")))
h = [float(r["h"]) for r in rows]
e = [float(r["err_l2_Omin"]) for r in rows]
plt.loglog(h, e, "o-", label="k={k}")
for c, p, style in [(0.01, 0.45, ":"), (0.001, 0.9, "--"), (0.0001, 1.35, "-")]:
    plt.loglog(h, [c * x ** p for x in h], "k" + style, label=f"{{c}} h^{{p}}")
plt.xlabel("h")
plt.ylabel("L2 error on x <= 0")
plt.legend()
plt.savefig("uc_convergence.png", dpi=150)
'''

RECON_PLOT = '''"""Coefficient error against 1/|log h|, with c |log h|^-0.5 reference curves."""
import csv
import math
import matplotlib.pyplot as plt

rows = list(csv.DictReader(open("{csv}")))
x = [1.0 / abs(math.log(float(r["h"]))) for r in rows]
e = [float(r["gamma_err_l2"]) for r in rows]
plt.plot(x, e, "o-", label="error")
for c in (0.18, 0.15, {c!r}):
    plt.plot(x, [c * t ** 0.5 for t in x], ":", label=f"{{c:.4g}} |log h|^-0.5")
plt.xlabel("1/|log h|")
plt.ylabel("L2 error of the coefficient")
plt.legend()
plt.savefig("reconstruction.png", dpi=150)
'''


def _rates_csv(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write("metric,model,value,constant,residual\n")
        for r in rows:
            fh.write(",".join([r[0], r[1]] + [repr(float(v)) for v in r[2:]]) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_uc_convergence(cfg: RunConfig):
    k = int(cfg.k)
    noise = PerturbationSpec(cfg.noise_dq, cfg.noise_df, cfg.noise_dgamma, cfg.seed)
    template = UcProblem(mesh=None, q=lookup(cfg.solution), gamma=1.0, alpha=cfg.alpha, k=k,
                         beta=BetaSchedule(cfg.beta0), noise=noise, data_scaling=cfg.data_scaling)
    base = disc_study_mesh(cfg.h0)
    ref = make_reference(cfg.solution)
    table = run_convergence_study(base, cfg.levels, template, ref)
    table.to_csv(cfg.out / "convergence.csv")
    write_mesh(base, cfg.out / "mesh_level0.txt")
    rows = []
    if cfg.levels >= 3:
        for metric in ("err_l2_Omin", "err_l2_B", "err_h1_B", "tn_total"):
            try:
                f = fit_power_rate(table, metric)
            except ValueError:
                continue
            rows.append((metric, "power", f.rate, f.constant, f.residual))
            print(f"rate {metric}: {f.rate:.4f}")
    _rates_csv(cfg.out / "rates.csv", rows)
    (cfg.out / "plot_convergence.py").write_text(UC_PLOT.format(csv="convergence.csv", k=k))
    for r in table.rows:
        print(f"level {r['level']}: h={r['h']:.4g} err_Omin={r['err_l2_Omin']:.4e} residual={r['residual']:.1e}")


def _recon_config(cfg: RunConfig):
    return ReconConfig(boundary_data=tuple(cfg.datasets), gamma_true=cfg.gamma_true, gamma0=cfg.gamma0,
                       k=int(cfg.k), l=int(cfg.l), alpha=cfg.alpha, beta0=cfg.beta0, step=cfg.step,
                       max_iter=cfg.max_iter, tol=cfg.tol, levels=cfg.levels, h0=cfg.h0,
                       gradient_mode=cfg.gradient_mode, update_mode=cfg.update_mode,
                       explicit_tikhonov=cfg.explicit_tikhonov, gamma_min=cfg.gamma_min,
                       sector=None if cfg.sector == "none" else cfg.sector, seed=cfg.seed)


def cmd_reconstruct(cfg: RunConfig):
    rc = _recon_config(cfg)
    result = reconstruct(rc)
    result.log_csv(cfg.out / "iterations.csv")
    result.levels_csv(cfg.out / "levels.csv")
    for lev in result.levels:
        write_gamma(lev.gamma, cfg.out / f"gamma_level{lev.level}.txt")
        write_mesh(lev.mesh, cfg.out / f"mesh_level{lev.level}.txt")
        print(f"level {lev.level}: h={lev.h:.4g} error={lev.gamma_err_l2:.4e} iterations={lev.iterations}")
    rows = []
    c = float("nan")
    if len(result.levels) >= 3:
        fit = fit_log_rate((result.hs(), result.errors()))
        c = fit.c
        rows.append(("gamma_err_l2", "log", fit.c, fit.free_constant, fit.residual))
        rows.append(("gamma_err_l2", "log_free_exponent", fit.free_exponent, fit.free_constant, fit.residual))
        print(f"fitted c in c|log h|^-0.5: {fit.c:.4f} (free exponent {fit.free_exponent:.3f})")
    _rates_csv(cfg.out / "rates.csv", rows)
    (cfg.out / "plot_reconstruction.py").write_text(RECON_PLOT.format(csv="levels.csv", c=c))


def _mesh_from(cfg):
    if cfg.geometry == "square":
        m = unit_square_mesh(cfg.n)
    else:
        m = disc_study_mesh(cfg.h0)
    for _ in range(cfg.levels - 1):
        m = refine_uniform(m)
    return m


def cmd_forward(cfg: RunConfig):
    m = _mesh_from(cfg)
    uh = forward_dirichlet(m, lookup(cfg.gamma), g=lookup(cfg.g), k=int(cfg.k))
    x = uh.space.node_coordinates()
    with open(cfg.out / "solution.csv", "w", newline="") as fh:
        fh.write("x,y,u\n")
        for (a, b), v in zip(x.tolist(), uh.coef.tolist()):
            fh.write(f"{a!r},{b!r},{v!r}\n")
    write_mesh(m, cfg.out / "mesh.txt")
    print(f"forward solve: {uh.space.ndof} dofs, h={mesh_size(m):.4g}")


def cmd_mesh_info(cfg: RunConfig):
    m = _mesh_from(cfg)
    problems = validate(m)
    chi = euler_characteristic(m)
    print(f"vertices: {m.n_vertices}")
    print(f"triangles: {m.n_triangles}")
    print(f"edges: {m.n_edges} ({len(m.boundary_edges)} on the boundary)")
    print(f"mesh size: {mesh_size(m):.6g}")
    print(f"area: {float(m.areas().sum()):.12g}")
    print(f"Euler check: {'pass' if chi == 1 else 'FAIL'} (V - E + T = {chi})")
    for name, idx in sorted(m.tri_region_tags.items()):
        print(f"region {name}: {len(idx)} triangles")
    for name, idx in sorted(m.edge_boundary_tags.items()):
        print(f"boundary {name}: {len(idx)} edges")
    print("valid" if not problems else "invalid: " + "; ".join(problems))
    write_mesh(m, cfg.out / "mesh.txt")
    if problems:
        raise RuntimeError("mesh failed validation")


def cmd_gradient_check(cfg: RunConfig):
    rc = ReconConfig(boundary_data=tuple(cfg.datasets), gamma_true=cfg.gamma_true, k=int(cfg.k), l=int(cfg.l),
                     alpha=cfg.alpha, beta0=cfg.beta0, gradient_mode=cfg.gradient_mode,
                     explicit_tikhonov=cfg.explicit_tikhonov, h0=cfg.h0)
    m = disc_study_mesh(cfg.h0)
    sources = manufacture_sources(m, rc.gamma_true, rc.boundary_data)
    problem = LevelProblem(m, [s.sample(m, rc.omega, rc.sector) for s in sources], rc)
    rng = np.random.default_rng(cfg.seed)
    gamma = problem.field(1.0 + 0.5 * rng.random(problem.G.ndof))
    with open(cfg.out / "gradient_check.csv", "w", newline="") as fh:
        fh.write("direction,eps,analytic,finite_difference,rel_error\n")
        for d in range(cfg.directions):
            v = rng.standard_normal(problem.G.ndof)
            chk = fd_gradient_check(problem, gamma, v, mode=cfg.gradient_mode,
                                    explicit_tikhonov=cfg.explicit_tikhonov)
            for eps, fd, rel in chk.rows:
                fh.write(f"{d},{eps!r},{chk.analytic!r},{fd!r},{rel!r}\n")
            print(f"direction {d}: best relative error {chk.best:.3e}")


COMMANDS = {
    "uc-convergence": cmd_uc_convergence,
    "reconstruct": cmd_reconstruct,
    "forward": cmd_forward,
    "mesh-info": cmd_mesh_info,
    "gradient-check": cmd_gradient_check,
}

DESCRIPTIONS = {
    "uc-convergence": "unique continuation convergence study on the unit disc",
    "reconstruct": "multi-level steepest-descent reconstruction of the diffusion coefficient",
    "forward": "Dirichlet forward solve",
    "mesh-info": "mesh statistics and validity checks",
    "gradient-check": "finite-difference verification of the coefficient gradient",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="kvmixed", description=__doc__.split("\n\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog=f"Default output directory: ${OUT_ENV} or ./{DEFAULT_OUT}")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMA.items():
        p = sub.add_parser(name, help=DESCRIPTIONS[name], description=DESCRIPTIONS[name],
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--config", help="configuration file with [common] and [%s] sections" % name)
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        for key, prm in {**COMMON, **schema}.items():
            extra = f" [{prm.kind}; one of {', '.join(prm.choices)}]" if prm.choices else f" [{prm.kind}]"
            default = "; ".join(prm.default) if isinstance(prm.default, tuple) else prm.default
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="VALUE",
                           help=f"{prm.help}{extra} (default: {default})")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    kind = args.command
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "out") and v is not None}
    try:
        cfg = parse_config(kind, args.config, overrides, args.out)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=cfg.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    cfg.out.mkdir(parents=True, exist_ok=True)
    marker = cfg.out / "INCOMPLETE"
    marker.write_text(f"{kind} started\n")
    t0 = time.perf_counter()
    try:
        COMMANDS[kind](cfg)
    except Exception as exc:  # surfaced with context; partial outputs stay flagged
        marker.write_text(f"{kind} failed: {type(exc).__name__}: {exc}\n")
        print(f"error: {kind} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        print(f"partial outputs in {cfg.out} are flagged by {marker.name}", file=sys.stderr)
        return 1
    marker.unlink()
    log.info("%s finished in %.1fs; outputs in %s", kind, time.perf_counter() - t0, cfg.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
