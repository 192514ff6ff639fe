"""Time the compiled and numpy flow kernels on the three built-in models.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Reports the median wall time of one forward pass and one forward+backward
pass per backend, and the speedup of the compiled core.
"""

import argparse
import json
import statistics
import time

import numpy as np

from shflow import model as M
from shflow._kernels import HAVE_COMPILED, run_backward, run_forward

CASES = [
    # (name, builder, N, p or d, M, R, L, batch)
    ("gaussian d=10", "gaussian", 10000, 10, 30, 5, 10, 1),
    ("gaussian d=2 batch=100", "gaussian", 1000, 2, 20, 5, 10, 100),
    ("linreg p=3", "linreg", 2000, 3, 30, 8, 10, 1),
    ("logreg p=3", "logreg", 2000, 3, 30, 8, 10, 1),
]


def build(kind, N, p, rng):
    X = rng.standard_normal((N, p))
    if kind == "gaussian":
        return M.make_gaussian_location(M.Dataset(X), 100.0)
    if kind == "linreg":
        return M.make_linreg(M.Dataset(X, X.sum(axis=1) + rng.standard_normal(N)))
    return M.make_logreg(M.Dataset(X, (rng.random(N) < 0.5).astype(float)))


def median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def run(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for name, kind, N, p, m, R, L, B in CASES:
        model = build(kind, N, p, rng)
        d = model.dim
        idx = rng.choice(N, m, replace=False)
        w = np.full(m, N / m)
        eps = np.full(d, 1e-3)
        shifts = np.zeros((R, d))
        scales = np.zeros((R, d))
        theta = 0.1 * rng.standard_normal((B, d))
        rho = rng.standard_normal((B, d))
        row = {"case": name}
        for backend in ("python", "compiled"):
            if backend == "compiled" and not HAVE_COMPILED:
                continue

            def fwd():
                return run_forward(model, idx, w, eps, shifts, scales, L, theta, rho,
                                   backend=backend)

            def fwd_bwd():
                th, rh, tr = run_forward(model, idx, w, eps, shifts, scales, L, theta, rho,
                                         record=True, backend=backend)
                run_backward(model, idx, w, eps, shifts, scales, L, tr, th, -rh,
                             backend=backend)

            fwd_bwd()
            row[f"{backend}_forward_s"] = median_time(fwd, repeat)
            row[f"{backend}_grad_s"] = median_time(fwd_bwd, repeat)
        if HAVE_COMPILED:
            row["speedup_forward"] = row["python_forward_s"] / row["compiled_forward_s"]
            row["speedup_grad"] = row["python_grad_s"] / row["compiled_grad_s"]
        rows.append(row)
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args()
    rows = run(args.repeat)
    print(f"compiled core available: {HAVE_COMPILED}")
    print(f"{'case':26s} {'py fwd':>10s} {'c fwd':>10s} {'py grad':>10s} {'c grad':>10s} {'x fwd':>7s} {'x grad':>7s}")
    for r in rows:
        print(f"{r['case']:26s} {r['python_forward_s']*1e3:9.2f}ms "
              f"{r.get('compiled_forward_s', float('nan'))*1e3:9.2f}ms "
              f"{r['python_grad_s']*1e3:9.2f}ms {r.get('compiled_grad_s', float('nan'))*1e3:9.2f}ms "
              f"{r.get('speedup_forward', float('nan')):7.1f} {r.get('speedup_grad', float('nan')):7.1f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
