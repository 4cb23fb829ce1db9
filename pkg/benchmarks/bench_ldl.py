"""Compare the compiled and pure-Python sparse LDL^T kernels.

The KKT matrices come from real transcriptions (regulator, Hermite-Simpson,
on-mesh rates) so the sparsity is what the solver actually factorises.

    python3 benchmarks/bench_ldl.py --nodes 50 100 200 --repeats 5
"""
import argparse
import time

import numpy as np

from ratecoll import _core
from ratecoll.collocation import Mesh, Scheme
from ratecoll.problems import get_problem
from ratecoll.solver import KktSystem
from ratecoll.transcription import eval_all, transcribe
from ratecoll.ocp import RateMode, validate


def kkt_inputs(nodes, seed=0):
    problem = transcribe(validate(get_problem("sosr")), Mesh.uniform(Scheme.HERMITE_SIMPSON, nodes),
                         RateMode.ON_MESH)
    rng = np.random.default_rng(seed)
    z = problem.initial_guess() + 1e-2 * rng.standard_normal(problem.n)
    y = rng.standard_normal(problem.m)
    _, _, jac, hess = eval_all(problem, z, y)
    return problem.n, problem.m, hess, jac, rng


def time_kernel(name, n, m, hess, jac, rng, repeats):
    kkt = KktSystem(n, m, hess, jac, kernel=name)
    hu = hess.tocsr()
    diag_x = 1.0 + rng.random(n)
    diag_c = 1e-8 * np.ones(m)
    rhs = rng.standard_normal(n + m)
    best_f = best_s = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        kkt.factor(hu.data if hu.nnz else np.zeros(0), jac.tocsr().data, diag_x, diag_c)
        t1 = time.perf_counter()
        sol = kkt.solve(rhs)
        t2 = time.perf_counter()
        best_f, best_s = min(best_f, t1 - t0), min(best_s, t2 - t1)
    return best_f, best_s, sol


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, nargs="+", default=[50, 100, 200])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)

    kernels = _core.backends()
    print(f"available kernels: {', '.join(kernels)} (default: {_core.BACKEND})")
    print(f"{'nodes':>6} {'n+m':>7} {'kernel':>8} {'factor ms':>10} {'solve ms':>10} {'speedup':>8}")
    for nodes in args.nodes:
        n, m, hess, jac, rng = kkt_inputs(nodes)
        results = {}
        for name in kernels:
            results[name] = time_kernel(name, n, m, hess, jac, np.random.default_rng(1), args.repeats)
        ref = results["python"]
        for name, (tf, ts, sol) in results.items():
            speed = (ref[0] + ref[1]) / (tf + ts)
            print(f"{nodes:>6} {n + m:>7} {name:>8} {1e3 * tf:>10.3f} {1e3 * ts:>10.3f} {speed:>7.1f}x")
        if "cython" in results:
            diff = np.max(np.abs(results["cython"][2] - ref[2]))
            print(f"{'':>6} max |x_cython - x_python| = {diff:.2e}")


if __name__ == "__main__":
    main()
