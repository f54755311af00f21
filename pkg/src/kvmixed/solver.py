"""Sparse direct solves with residual certification, and the forward Dirichlet solver."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-9


class SolverError(RuntimeError):
    pass


@dataclass(eq=False)
class SaddleSystem:
    """Symmetric sparse system over the concatenated (u, sigma, z) vector.

    ``matrix``/``rhs`` act on the free dofs only; dofs in ``fixed`` carry the
    prescribed ``fixed_values`` and have been moved to the right-hand side.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    block_sizes: tuple
    free: np.ndarray
    fixed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    fixed_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_full(self):
        return int(sum(self.block_sizes))

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.block_sizes)]).astype(np.int64)

    def expand(self, x_free):
        x = np.empty(self.n_full)
        x[self.free] = x_free
        x[self.fixed] = self.fixed_values
        return x

    def split(self, x_full):
        o = self.offsets
        return tuple(x_full[o[i]:o[i + 1]] for i in range(len(self.block_sizes)))

    def symmetry_defect(self):
        d = self.matrix - self.matrix.T
        return float(abs(d).max()) if d.nnz else 0.0


def relative_residual(A, x, b):
    return float(np.linalg.norm(A @ x - b) / max(np.linalg.norm(b), 1.0))


class Factorization:
    """SuperLU factorisation of a square sparse matrix; reusable for several right-hand sides."""

    def __init__(self, A):
        A = sp.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise SolverError(f"matrix is not square: {A.shape}")
        self.A = A
        try:
            self.lu = spla.splu(A, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise SolverError(f"factorisation failed: {exc}") from exc
        d = np.abs(self.lu.U.diagonal())
        if not np.all(np.isfinite(d)) or d.min() <= np.finfo(float).eps * d.max() * 1e-3:
            raise SolverError("matrix is singular to working precision")

    def solve(self, b, tol=RESIDUAL_TOL, refine=2):
        b = np.asarray(b, dtype=float)
        x = self.lu.solve(b)
        res = relative_residual(self.A, x, b)
        for _ in range(refine):
            if res <= 1e-3 * tol:
                break
            x = x + self.lu.solve(b - self.A @ x)
            res = relative_residual(self.A, x, b)
        if not np.isfinite(res) or res > tol:
            raise SolverError(f"relative residual {res:.3e} exceeds {tol:.1e}")
        return x, res


class ReusableSolver:
    """Solve a sequence of systems whose matrices drift slowly (e.g. along a descent path).

    The last factorisation preconditions GMRES for a new matrix; when GMRES
    needs more than ``max_krylov`` iterations (or fails to certify the
    residual) the new matrix is factorised.  A solve that took more than
    ``refactor_after`` iterations triggers a fresh factorisation on the next
    call.  Every returned solution is residual-certified.
    """

    def __init__(self, tol=RESIDUAL_TOL, max_krylov=40, refactor_after=20, krylov_rtol=1e-11):
        self.tol = tol
        self.max_krylov = max_krylov
        self.refactor_after = refactor_after
        self.krylov_rtol = krylov_rtol
        self._fact = None
        self._matrix = None
        self._stale = True
        self.n_factorizations = 0
        self.n_krylov = 0

    def _factor(self, A):
        self._matrix = A
        self._fact = Factorization(A)
        self._stale = False
        self.n_factorizations += 1

    def solve(self, A, rhs):
        """Solve ``A x = b`` for each column of ``rhs`` (1-D or list of vectors)."""
        if not sp.issparse(A):
            A = sp.csr_matrix(A)
        single = np.ndim(rhs) == 1
        cols = [np.asarray(rhs, dtype=float)] if single else [np.asarray(b, dtype=float) for b in rhs]
        if self._fact is None or self._stale or self._fact.A.shape != A.shape:
            self._factor(A)
        out = []
        for b in cols:
            if A is self._matrix or (A.shape == self._matrix.shape and (A != self._matrix).nnz == 0):
                out.append(self._fact.solve(b, self.tol))
                continue
            x, res, its = self._krylov(A, b)
            if x is None:
                self._factor(A)
                out.append(self._fact.solve(b, self.tol))
                continue
            if its > self.refactor_after:
                self._stale = True
            out.append((x, res))
        return out[0] if single else out

    def _krylov(self, A, b):
        M = spla.LinearOperator(A.shape, self._fact.lu.solve, dtype=float)
        its = [0]

        def count(_):
            its[0] += 1

        x0 = self._fact.lu.solve(b)
        x, _ = spla.gmres(A, b, x0=x0, M=M, rtol=self.krylov_rtol, atol=0.0, restart=self.max_krylov,
                             maxiter=1, callback=count, callback_type="pr_norm")
        self.n_krylov += its[0]
        res = relative_residual(A, x, b)
        if not np.isfinite(res) or res > self.tol:
            return None, res, its[0]
        return x, res, its[0]


def lu_solve(system, tol=RESIDUAL_TOL):
    """Solve a :class:`SaddleSystem` (or a ``(matrix, rhs)`` pair).

    Returns the full solution vector (fixed dofs re-inserted) and the relative
    residual ``||Ax - b|| / max(||b||, 1)`` of the reduced system.
    """
    if isinstance(system, SaddleSystem):
        x, res = Factorization(system.matrix).solve(system.rhs, tol)
        return system.expand(x), res
    A, b = system
    return Factorization(A).solve(b, tol)


@dataclass(eq=False)
class FieldTriple:
    """Discrete (u_h, sigma_h, z_h) over V_k x RT_{k-1} x X_{k-1}."""

    u: object
    sigma: object
    z: object
    residual: float = 0.0

    @property
    def mesh(self):
        return self.u.space.mesh


def forward_dirichlet(mesh, gamma, f=None, g=0.0, k=1, tol=1e-10):
    """Galerkin solution of ``(gamma grad u, grad v) = (f, v)`` with nodal Dirichlet data ``g``.

    ``gamma`` may be a scalar, a callable ``gamma(x, y)`` or a coefficient
    field; ``g`` a scalar or callable evaluated at the boundary nodes.
    """
    from .fem.assembly import load_vector, stiffness_matrix
    from .fem.spaces import FunctionSpace, coefficient_qp, function_qp

    V = FunctionSpace(mesh, "CG", k)
    gq = coefficient_qp(mesh, gamma)
    if np.any(gq <= 0):
        raise SolverError("diffusivity must be positive")
    K = stiffness_matrix(V, gq).tocsr()
    F = load_vector(V, function_qp(mesh, f))
    bd = V.boundary_dofs()
    x = V.node_coordinates()
    u = np.zeros(V.ndof)
    u[bd] = np.asarray(g(x[bd, 0], x[bd, 1]), dtype=float) if callable(g) else float(g)
    interior = np.setdiff1d(np.arange(V.ndof), bd)
    rhs = F[interior] - K[interior][:, bd] @ u[bd]
    Kii = K[interior][:, interior]
    u[interior], res = Factorization(Kii).solve(rhs, tol)
    log.debug("forward solve: %d dofs, residual %.2e", V.ndof, res)
    return V.function(u)
