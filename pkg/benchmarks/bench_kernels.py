"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--nodes 200] [--sets 16] [--k 10] [--repeat 5]
"""

import argparse
import time

import numpy as np

from g3dm import _kernels_py


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=200, help="nodes per set")
    ap.add_argument("--sets", type=int, default=16)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--channels", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args(argv)
    try:
        from g3dm import _kernels as compiled
    except ImportError:
        compiled = None
        print("compiled kernels not built; timing the fallback only")

    rng = np.random.default_rng(0)
    starts = np.arange(a.sets + 1, dtype=np.int64) * a.nodes
    pts = rng.normal(size=(starts[-1], 6))
    feats = rng.normal(size=(starts[-1], a.channels))
    nbr = _kernels_py.knn_segments(pts, starts, a.k)
    _, arg = _kernels_py.gather_max(feats, nbr)
    grad = rng.normal(size=arg.shape)

    jobs = {
        "knn_segments": lambda m: m.knn_segments(pts, starts, a.k),
        "gather_max": lambda m: m.gather_max(feats, nbr),
        "scatter_add_rows": lambda m: m.scatter_add_rows(grad, arg, len(feats)),
        "segment_max": lambda m: m.segment_max(feats, starts),
    }
    print(f"{a.sets} sets x {a.nodes} nodes, k={a.k}, {a.channels} channels; best of {a.repeat}")
    print(f"{'kernel':<18}{'python ms':>11}{'cython ms':>11}{'speedup':>9}")
    for name, job in jobs.items():
        tp = best_of(lambda: job(_kernels_py), a.repeat) * 1e3
        if compiled is None:
            print(f"{name:<18}{tp:>11.2f}{'-':>11}{'-':>9}")
            continue
        tc = best_of(lambda: job(compiled), a.repeat) * 1e3
        print(f"{name:<18}{tp:>11.2f}{tc:>11.2f}{tp / tc:>8.1f}x")


if __name__ == "__main__":
    main()
