"""Compare the compiled and pure-Python kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--n 1600] [--G 20] [--s-max 2] [--repeat 3]
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from sparse_bvm import kernels
from sparse_bvm.design import GroupedDesign, enumerate_supports
from sparse_bvm.family import get_family
from sparse_bvm.posterior import _cols_matrix, _parents


def _timed(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=1600)
    ap.add_argument("--G", type=int, default=20)
    ap.add_argument("--s-max", type=int, default=2)
    ap.add_argument("--points", type=int, default=4096)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not kernels.compiled_available():
        raise SystemExit("compiled kernels are not built; run pip install -e . --no-build-isolation")

    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((args.n, args.G))
    x *= np.sqrt(args.n) / np.linalg.norm(x, axis=0)
    design = GroupedDesign(x, [1] * args.G)
    supports = [s for s in enumerate_supports(args.G, args.s_max) if s]
    cols = _cols_matrix(design, supports)
    parent = _parents(supports)
    beta0 = np.zeros(args.G)
    beta0[:2] = [1.0, -1.0]
    results = []
    for kind in ("logistic", "poisson", "probit"):
        fam = get_family(kind)
        y = np.asarray(fam.sample(x @ (0.3 * beta0), 1.0, rng), dtype=float)
        tau = np.ones(args.n)
        row = {"family": kind, "supports": len(supports), "n": args.n}
        fits = {}
        for backend in ("python", "compiled"):
            t, out = _timed(lambda b=backend: kernels.fit_supports(x, y, tau, fam.code, 0.0, cols, parent,
                                                                    alpha=0.5, prior_prec=1.0, backend=b),
                            args.repeat)
            row[f"fit_{backend}_s"] = t
            fits[backend] = out[0]
        row["fit_speedup"] = row["fit_python_s"] / row["fit_compiled_s"]
        row["fit_max_abs_diff"] = float(np.max(np.abs(fits["python"] - fits["compiled"])))
        B = rng.standard_normal((args.points, 3)) * 0.3
        c3 = np.array([0, 1, 2])
        for backend in ("python", "compiled"):
            t, _ = _timed(lambda b=backend: kernels.loglik_points(x, y, tau, fam.code, 0.0, c3, B, backend=b),
                          args.repeat)
            row[f"points_{backend}_s"] = t
        row["points_speedup"] = row["points_python_s"] / row["points_compiled_s"]
        results.append(row)
        print(json.dumps(row), flush=True)
    return results


if __name__ == "__main__":
    main()
