"""Time the hot kernels under the numba and pure-numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on identical inputs under both backends; the outputs are
checked for agreement before timings are reported.
"""

import argparse
import time

import numpy as np

from naturalae import _accel, kernels
from naturalae.rps import NnIndex


def _cases(rng):
    src = rng.random((64, 64, 3))
    ys, xs = np.meshgrid(np.linspace(-2, 66, 64), np.linspace(-2, 66, 64), indexing="ij")
    coords = np.stack([xs + rng.normal(0, 0.3, xs.shape), ys], axis=-1)
    grad = rng.random((64, 64, 3))
    dcols = rng.random((8, 32, 32, 3, 3, 16))
    tree = NnIndex(rng.random((1700, 3)))
    queries = rng.random((3000, 3))
    return {
        "bilinear_gather 64x64x3": lambda: kernels.bilinear_gather(src, coords),
        "bilinear_scatter 64x64x3": lambda: kernels.bilinear_scatter(grad, coords, 64, 64),
        "col2im 8x(32x32) k3 c16": lambda: kernels.col2im(dcols, 66, 66, 2),
        "nn_query 3000 vs 1700 pts": lambda: kernels.nn_query(tree, queries)[1],
    }


def _time(fn, repeat):
    fn()  # warm-up (JIT compile / cache load)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        print("numba unavailable or disabled; only the numpy path will run")
    results = {}
    backends = ["numba", "numpy"] if _accel.HAVE_NUMBA else ["numpy"]
    for name in backends:
        prev = _accel.set_backend(name)
        try:
            cases = _cases(np.random.default_rng(0))
            results[name] = {k: (_time(f, args.repeat), f()) for k, f in cases.items()}
        finally:
            _accel.set_backend(prev)
    print(f"{'kernel':<30}" + "".join(f"{b:>14}" for b in backends) + ("   speedup" if len(backends) == 2 else ""))
    for k in results[backends[0]]:
        row = f"{k:<30}" + "".join(f"{results[b][k][0] * 1e3:>12.3f}ms" for b in backends)
        if len(backends) == 2:
            a, b = results["numba"][k][1], results["numpy"][k][1]
            if not np.allclose(a, b, rtol=1e-12, atol=1e-12):
                raise SystemExit(f"backend mismatch on {k}")
            row += f"{results['numpy'][k][0] / results['numba'][k][0]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
