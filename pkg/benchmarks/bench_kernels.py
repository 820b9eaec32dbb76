"""Time the compiled and pure-Python kernel backends on the bundled tree.

    python benchmarks/bench_kernels.py [--repeat N]

Each row reports the median wall time of one call per backend and the
speed-up of the compiled core over the fallback.
"""

from __future__ import annotations

import argparse
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from itpnp import kernels
from itpnp.geometry import se3_exp
from itpnp.objective import Hyperparams, regularizer_graph
from itpnp.simbench import bundled_tree, synthesize_case
from itpnp.solver import _FieldSystem


def median_ms(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def workloads(backend):
    problem, target, gt, _ = synthesize_case(bundled_tree())
    T = se3_exp([0.01, -0.02, 0.015, 2.0, -1.0, 3.0]) @ gt
    P, cam, Q = problem.points, problem.cam_array, problem.target_points
    rng = np.random.default_rng(0)
    r = rng.normal(scale=0.3, size=P.shape)
    uv, ok = kernels.project(P, None, T.rotation, T.translation, cam, backend=backend)
    index = kernels.knn_index(Q, backend=backend)
    src, tgt, dist, indptr = index.pairs(uv, ok, 2, np.inf)
    w = np.exp(-dist ** 2 / 50.0)
    G = regularizer_graph(problem, Hyperparams())
    system = _FieldSystem(G, 1.0, backend)
    # data-like diagonal blocks plus the regulariser diagonal, as in a solver iteration
    blocks = (50.0 + G.diagonal())[:, None, None] * np.eye(3)
    rhs = rng.normal(size=3 * problem.n_points)
    args = (P, r, T.rotation, T.translation, cam, indptr, tgt, w, Q)

    def factor_solve():
        system.factor(blocks)
        system.solve(rhs)

    return {
        "project": lambda: kernels.project(P, r, T.rotation, T.translation, cam, backend=backend),
        "weighted_cost": lambda: kernels.weighted_cost(*args, backend=backend),
        "accumulate (pose)": lambda: kernels.accumulate(*args, False, backend=backend),
        "accumulate (per point)": lambda: kernels.accumulate(*args, True, backend=backend),
        "knn build + k=2 pairs": lambda: kernels.knn_index(Q, backend=backend).pairs(uv, ok, 2, np.inf),
        "field factor + solve": factor_solve,
    }, problem.n_points


END_TO_END = """
import statistics, time
from itpnp import *
from itpnp.simbench import solver_config
problem, _, gt, _ = synthesize_case(bundled_tree())
spec = DisturbanceSpec(seed=41)
cfg = solver_config("rkhs")
times = []
for i in range({n}):
    start = gt @ sample_disturbance(spec, i)
    t0 = time.perf_counter()
    register(problem, start, cfg=cfg)
    times.append((time.perf_counter() - t0) * 1e3)
print(statistics.median(times))
"""


def end_to_end(backend, n):
    """Median rigid+nonrigid registration time in a fresh interpreter."""
    env = dict(os.environ, ITPNP_PURE_PYTHON="1" if backend == "python" else "0")
    out = subprocess.run([sys.executable, "-c", END_TO_END.format(n=n)], env=env, capture_output=True,
                         text=True, check=True)
    return float(out.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=30)
    args = ap.parse_args()
    names = [b for b in ("cython", "python") if b in kernels.BACKENDS]
    results = {}
    for b in names:
        work, n = workloads(b)
        results[b] = {k: median_ms(fn, args.repeat) for k, fn in work.items()}
        results[b]["register (end to end)"] = end_to_end(b, min(args.repeat, 20))
    print(f"{n} source points, median of {args.repeat} calls (ms)")
    header = f"{'kernel':<24}" + "".join(f"{b:>10}" for b in names) + ("   speed-up" if len(names) == 2 else "")
    print(header)
    print("-" * len(header))
    for k in results[names[0]]:
        row = f"{k:<24}" + "".join(f"{results[b][k]:>10.3f}" for b in names)
        if len(names) == 2:
            row += f"{results['python'][k] / results['cython'][k]:>10.1f}x"
        print(row)


if __name__ == "__main__":
    main()
