"""Compare the compiled and pure-Python kernels.

    python3 benchmarks/bench_kernels.py --pixels 4096 --dim 10 --counts 2,2,2,2

Reports the best-of-``--repeats`` wall time per kernel and backend, the
speedup, and the largest output difference between backends.
"""

from __future__ import annotations

import argparse
import logging
import time

import numpy as np

from unmix_gmm import _backend
from unmix_gmm import unmix as unmix_mod
from unmix_gmm.core import GaussianComponent, GmmBundle, ProjectionModel
from unmix_gmm.unmix import CombinationTable, UnmixOptions, unmix_projected


def random_bundle(rng, counts, d):
    per_class = []
    for K in counts:
        w = rng.dirichlet(np.full(K, 3.0))
        comps = []
        for k in range(K):
            B = rng.normal(size=(d, d))
            comps.append(GaussianComponent(w[k] / w.sum(), rng.normal(size=d), 0.05 * (B @ B.T / d + 0.05 * np.eye(d))))
        per_class.append(tuple(comps))
    return GmmBundle(tuple(f"c{j}" for j in range(len(counts))), tuple(per_class), ProjectionModel.identity(d))


def best_of(fn, repeats):
    best, out = np.inf, None
    for _ in range(repeats):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--pixels", type=int, default=4096)
    p.add_argument("--dim", type=int, default=10)
    p.add_argument("--counts", default="2,2,2,2", help="components per class")
    p.add_argument("--threads", type=int, default=1, help="threads for the compiled backend")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--outer-iters", type=int, default=5, help="outer iterations for the end-to-end row")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.ERROR)

    rng = np.random.default_rng(args.seed)
    counts = tuple(int(c) for c in args.counts.split(","))
    bundle = random_bundle(rng, counts, args.dim)
    tab = CombinationTable.from_bundle(bundle)
    Y = rng.normal(size=(args.pixels, args.dim))
    A = rng.dirichlet(np.ones(len(counts)), size=args.pixels)
    base = (Y, A, tab.comp_means, tab.comp_covs, tab.combos)
    gamma = np.full((args.pixels, tab.n_combinations), 1.0 / tab.n_combinations)
    V = rng.normal(size=(args.pixels, len(counts)))
    opts = UnmixOptions(tol=0.0, max_outer_iters=args.outer_iters, threads=args.threads)

    backends = _backend.available()
    print(
        f"N={args.pixels} d={args.dim} |K|={tab.n_combinations} threads={args.threads} "
        f"backends={sorted(backends)}"
    )
    rows = {}
    for name, k in sorted(backends.items()):
        threads = args.threads if name == "compiled" else 1
        unmix_mod.kernels = k
        rows[name] = {
            "log_joint": best_of(lambda: k.log_joint(*base, tab.log_priors, tab.noise, threads), args.repeats),
            "weighted_gradient": best_of(lambda: k.weighted_gradient(*base, tab.noise, gamma, threads), args.repeats),
            "project_simplex": best_of(lambda: k.project_simplex_rows(V), args.repeats),
            f"unmix ({args.outer_iters} iters)": best_of(lambda: unmix_projected(Y, bundle, opts)[0], args.repeats),
        }
    unmix_mod.kernels = _backend.kernels

    print(f"{'kernel':<24}" + "".join(f"{n:>12}" for n in sorted(rows)) + ("   speedup   max |diff|" if len(rows) == 2 else ""))
    for kernel in rows["python"]:
        line = f"{kernel:<24}" + "".join(f"{rows[n][kernel][0]:>11.4f}s" for n in sorted(rows))
        if "compiled" in rows:
            tc, oc = rows["compiled"][kernel]
            tp, op = rows["python"][kernel]
            line += f"   {tp / tc:>7.1f}x   {float(np.max(np.abs(oc - op))):.1e}"
        print(line)


if __name__ == "__main__":
    main()
