"""Compare the numba and numpy element kernels on realistic disc-mesh data.

    python benchmarks/bench_kernels.py [--level N] [--repeat R]

Prints median wall-clock times per kernel and the max deviation between the
two implementations.  The first numba call (compilation, or cache load) is
excluded from the timings.
"""

import argparse
import time

import numpy as np

from kvmixed import _accel
from kvmixed.fem import FunctionSpace, quadrature_points, quadrature_weights
from kvmixed.fem.spaces import locator
from kvmixed.mesh import disc_study_mesh


def _median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return float(np.median(times))


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--level", type=int, default=2, help="uniform refinements of the h=0.17 disc mesh")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    mesh = disc_study_mesh(0.17, args.level)
    V = FunctionSpace(mesh, "CG", 2)
    RT = FunctionSpace(mesh, "RT", 1)
    w = quadrature_weights(mesh)
    _, grads = V.tabulate()
    vals, _ = RT.tabulate()
    f = np.sin(quadrature_points(mesh)[..., 0])[..., None]
    vV, _ = V.tabulate()
    vV = np.ascontiguousarray(vV[..., None])

    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.7, 0.7, size=(20000, 2))
    loc = locator(mesh)
    _, cand = loc.tree.query(pts, k=loc.k)
    cand = np.ascontiguousarray(cand, dtype=np.int64)
    corners = np.ascontiguousarray(mesh.corners())

    cases = {
        "bilinear grad(V2) x RT1": (_accel.element_bilinear_numba, _accel.element_bilinear_numpy,
                                    (w, np.ascontiguousarray(grads), np.ascontiguousarray(vals))),
        "linear V2 load": (_accel.element_linear_numba, _accel.element_linear_numpy,
                           (w, vV, np.ascontiguousarray(f))),
        "point location": (_accel.locate_numba, _accel.locate_numpy, (pts, cand, corners)),
    }
    print(f"mesh: {mesh}; numba available: {_accel.HAVE_NUMBA}; active backend: {_accel.backend()}")
    print(f"{'kernel':28s} {'numba [s]':>10s} {'numpy [s]':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, (fn_nb, fn_np, a) in cases.items():
        r_nb = fn_nb(*a)  # compile / load cache
        r_np = fn_np(*a)
        first_nb = r_nb[0] if isinstance(r_nb, tuple) else r_nb
        first_np = r_np[0] if isinstance(r_np, tuple) else r_np
        diff = float(np.max(np.abs(np.asarray(first_nb, float) - np.asarray(first_np, float))))
        t_nb = _median_time(lambda: fn_nb(*a), args.repeat)
        t_np = _median_time(lambda: fn_np(*a), args.repeat)
        print(f"{name:28s} {t_nb:10.4f} {t_np:10.4f} {t_np / t_nb:8.2f} {diff:11.2e}")


if __name__ == "__main__":
    main()
