"""Hot element loops, compiled with numba when available.

Every kernel exists twice: a loop version decorated with ``@njit`` and a
vectorised numpy version.  Which one the rest of the package calls is decided
once at import time:

* ``KVMIXED_DISABLE_NUMBA=1`` in the environment forces the numpy path;
* a missing numba install falls back to numpy silently.

Both versions stay importable (``*_numba`` / ``*_numpy``) so the test-suite and
``benchmarks/bench_kernels.py`` can compare them directly.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrapper(f):
            return f

        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return wrapper


def _env_disabled():
    return os.environ.get("KVMIXED_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


USE_NUMBA = HAVE_NUMBA and not _env_disabled()


# ---------------------------------------------------------------------------
# element bilinear forms:  K[t, i, j] = sum_q w[t, q] * A[t, q, i, :] . B[t, q, j, :]


@njit(cache=True)
def element_bilinear_numba(w, A, B):
    nt, nq, na, nc = A.shape
    nb = B.shape[2]
    out = np.zeros((nt, na, nb))
    for t in range(nt):
        for q in range(nq):
            wq = w[t, q]
            if wq == 0.0:
                continue
            for i in range(na):
                for j in range(nb):
                    s = 0.0
                    for c in range(nc):
                        s += A[t, q, i, c] * B[t, q, j, c]
                    out[t, i, j] += wq * s
    return out


def element_bilinear_numpy(w, A, B):
    return np.einsum("tq,tqic,tqjc->tij", w, A, B, optimize=True)


# ---------------------------------------------------------------------------
# element load vectors:  F[t, i] = sum_q w[t, q] * A[t, q, i, :] . G[t, q, :]


@njit(cache=True)
def element_linear_numba(w, A, G):
    nt, nq, na, nc = A.shape
    out = np.zeros((nt, na))
    for t in range(nt):
        for q in range(nq):
            wq = w[t, q]
            if wq == 0.0:
                continue
            for i in range(na):
                s = 0.0
                for c in range(nc):
                    s += A[t, q, i, c] * G[t, q, c]
                out[t, i] += wq * s
    return out


def element_linear_numpy(w, A, G):
    return np.einsum("tq,tqic,tqc->ti", w, A, G, optimize=True)


# ---------------------------------------------------------------------------
# point location among candidate triangles: pick the candidate whose smallest
# barycentric coordinate is largest (>= 0 means inside).


@njit(cache=True)
def locate_numba(points, candidates, corners):
    npts, ncand = candidates.shape
    best = np.empty(npts, dtype=np.int64)
    bary = np.empty((npts, 3))
    score = np.empty(npts)
    for p in range(npts):
        x = points[p, 0]
        y = points[p, 1]
        best_s = -np.inf
        best_t = -1
        b0 = 0.0
        b1 = 0.0
        b2 = 0.0
        for c in range(ncand):
            t = candidates[p, c]
            x0 = corners[t, 0, 0]
            y0 = corners[t, 0, 1]
            x1 = corners[t, 1, 0]
            y1 = corners[t, 1, 1]
            x2 = corners[t, 2, 0]
            y2 = corners[t, 2, 1]
            det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
            l1 = ((x - x0) * (y2 - y0) - (x2 - x0) * (y - y0)) / det
            l2 = ((x1 - x0) * (y - y0) - (x - x0) * (y1 - y0)) / det
            l0 = 1.0 - l1 - l2
            s = min(l0, min(l1, l2))
            if s > best_s:
                best_s = s
                best_t = t
                b0 = l0
                b1 = l1
                b2 = l2
        best[p] = best_t
        bary[p, 0] = b0
        bary[p, 1] = b1
        bary[p, 2] = b2
        score[p] = best_s
    return best, bary, score


def locate_numpy(points, candidates, corners):
    c = corners[candidates]  # (np, k, 3, 2)
    x0 = c[:, :, 0, :]
    e1 = c[:, :, 1, :] - x0
    e2 = c[:, :, 2, :] - x0
    d = points[:, None, :] - x0
    det = e1[..., 0] * e2[..., 1] - e2[..., 0] * e1[..., 1]
    l1 = (d[..., 0] * e2[..., 1] - e2[..., 0] * d[..., 1]) / det
    l2 = (e1[..., 0] * d[..., 1] - d[..., 0] * e1[..., 1]) / det
    l0 = 1.0 - l1 - l2
    lam = np.stack([l0, l1, l2], axis=-1)
    s = lam.min(axis=-1)
    k = np.argmax(s, axis=1)
    rows = np.arange(points.shape[0])
    return candidates[rows, k].astype(np.int64), lam[rows, k], s[rows, k]


def _pick(numba_fn, numpy_fn):
    return numba_fn if USE_NUMBA else numpy_fn


def element_bilinear(w, A, B):
    """Batched element matrices, shape ``(nt, na, nb)``."""
    f = _pick(element_bilinear_numba, element_bilinear_numpy)
    return f(np.ascontiguousarray(w, dtype=float), np.ascontiguousarray(A, dtype=float),
             np.ascontiguousarray(B, dtype=float))


def element_linear(w, A, G):
    """Batched element load vectors, shape ``(nt, na)``."""
    f = _pick(element_linear_numba, element_linear_numpy)
    return f(np.ascontiguousarray(w, dtype=float), np.ascontiguousarray(A, dtype=float),
             np.ascontiguousarray(G, dtype=float))


def locate(points, candidates, corners):
    f = _pick(locate_numba, locate_numpy)
    return f(np.ascontiguousarray(points, dtype=float), np.ascontiguousarray(candidates, dtype=np.int64),
             np.ascontiguousarray(corners, dtype=float))


def backend():
    return "numba" if USE_NUMBA else "numpy"
