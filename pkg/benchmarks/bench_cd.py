"""Time the compiled and pure-Python coordinate-descent kernels.

Runs the same workloads under each available backend, checks that the
coefficients agree bit for bit, and prints one line per (workload, backend).

    python3 benchmarks/bench_cd.py [--repeat 3] [--quick]
"""

import argparse
import time

import numpy as np

from sparse_ame import lasso
from sparse_ame.core import DiscreteGrid, TruncatedUniform
from sparse_ame.oracle import ThresholdGame
from sparse_ame.sampling import Featurization, assemble_design, sample_rows


def threshold_design(n, m, seed, knockoffs=False):
    if knockoffs:
        law = DiscreteGrid((0.2, 0.4, 0.6, 0.8))
        feat = Featurization.for_distribution("inverse_p", law)
    else:
        feat = Featurization.for_distribution("pfeat", TruncatedUniform(0.05))
    rows = sample_rows(n, m, feat.sampling_law, seed, knockoffs=knockoffs)
    y = ThresholdGame(n, 3).evaluate_many(rows.masks)
    return assemble_design(rows.masks, rows.p, y, feat, rows.knockoff_masks, dummies=knockoffs,
                           levels=getattr(feat.dist, "values", None))


def workloads(quick):
    sizes = [(200, 256), (1000, 1024)] if quick else [(200, 256), (1000, 1024), (1000, 4096)]
    for n, m in sizes:
        d = threshold_design(n, m, 0)
        # the path stops at lambda_max / 100; below that M ~ N designs head for interpolation
        grid = lasso.lambda_path(d, min_ratio=1e-2, intercept=True)
        yield f"path N={n} M={m}", lambda d=d, g=grid: lasso.fit_path(d, g, intercept=True)[-1].beta
        yield f"cv20 N={n} M={m}", lambda d=d: lasso.fit_with_rule(d, "min", 20, 0, intercept=True)[0].beta
    d = threshold_design(500, 400, 1, knockoffs=True)
    yield "cv20 knockoffs N=500 M=400", lambda d=d: lasso.fit_with_rule(d, "1se", 20, 0, intercept=True)[0].beta


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args(argv)
    backends = lasso.available_backends()
    print(f"backends: {', '.join(backends)}", flush=True)
    prev = lasso.BACKEND
    try:
        for name, run in workloads(args.quick):
            results, times = {}, {}
            for b in backends:
                lasso.use_backend(b)
                best = np.inf
                for _ in range(args.repeat):
                    t0 = time.perf_counter()
                    results[b] = run()
                    best = min(best, time.perf_counter() - t0)
                times[b] = best
            ref = results[backends[0]]
            same = all(np.array_equal(ref, r) for r in results.values())
            for b in backends:
                speed = times["python"] / times[b] if "python" in times else float("nan")
                print(f"{name:30s} {b:7s} {times[b] * 1e3:9.1f} ms  x{speed:5.1f}  identical={same}", flush=True)
    finally:
        lasso.use_backend(prev)


if __name__ == "__main__":
    main()
