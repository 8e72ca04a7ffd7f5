"""Compare the numba and numpy certification kernels on a pendulum model.

    python3 benchmarks/bench_certify.py [--simplices 200000] [--repeat 3]
"""
from __future__ import annotations

import argparse
import math
import time

import numpy as np

from gpcert import _accel
from gpcert.certifier import certify, simplex_bounds
from gpcert.controller import ClosedLoopModel, CostSpec, init_lqr
from gpcert.geometry import triangulate_box
from gpcert.gpmodel import fit_mean, optimize_hyperparams, sample_training_set
from gpcert.simulator import PENDULUM_G, grid_states, pendulum_f

BOX = [(-6.0, 6.0), (-6.0, 6.0)]


def build_model() -> ClosedLoopModel:
    ts = sample_training_set(pendulum_f, BOX, 9, 0.1, np.random.default_rng(42))
    gp = fit_mean(ts, optimize_hyperparams(ts, [0.0, 0.0, 0.0, math.log(0.1)]).hp)
    cost = CostSpec.default()
    li = init_lqr(gp, PENDULUM_G, cost, grid_states(BOX, 21))
    return ClosedLoopModel(gp, PENDULUM_G, li.value, cost)


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--simplices", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--grid-step", type=float, default=0.2)
    ap.add_argument("--depth", type=int, default=3)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; only the numpy path is available")

    m = build_model()
    t = triangulate_box(BOX, args.grid_step)
    fine = t.refine(max(0, math.ceil(math.log(args.simplices / t.simplex_count, 4))))
    X = fine.vertex_array(0, min(args.simplices, fine.simplex_count))
    tau = fine.tau

    simplex_bounds(m, X[:8], tau, use_numba=True)          # compile outside the timing
    ref = simplex_bounds(m, X, tau, use_numba=False)
    got = simplex_bounds(m, X, tau, use_numba=True)
    diff = max(float(np.abs(a - b).max() / max(np.abs(a).max(), 1e-300)) for a, b in zip(ref, got))

    t_np = best_of(lambda: simplex_bounds(m, X, tau, use_numba=False), args.repeat)
    t_nb = best_of(lambda: simplex_bounds(m, X, tau, use_numba=True), args.repeat)
    print(f"simplex_bounds on {X.shape[0]} simplices: numpy {t_np:.3f}s, numba {t_nb:.3f}s, "
          f"speedup {t_np / t_nb:.1f}x, max rel diff {diff:.1e}")

    c_np = best_of(lambda: certify(m, t, refine_depth=args.depth, use_numba=False), 1)
    c_nb = best_of(lambda: certify(m, t, refine_depth=args.depth, use_numba=True), 1)
    print(f"certify (grid {args.grid_step}, depth {args.depth}): numpy {c_np:.2f}s, numba {c_nb:.2f}s, "
          f"speedup {c_np / c_nb:.1f}x")


if __name__ == "__main__":
    main()
