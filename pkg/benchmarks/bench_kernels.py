"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--quick]

Prints one line per kernel with the best-of-N wall time of each backend and
the speed-up. Both backends are imported directly, so the environment
switch that picks the active one does not matter here.
"""
import argparse
import timeit

import numpy as np

from patchpose import _pykernels

try:
    from patchpose import _ckernels
except ImportError:
    _ckernels = None


def cases(quick: bool):
    rng = np.random.default_rng(0)
    n_pts = 2000 if quick else 20000
    side = 64 if quick else 128
    u = rng.uniform(0, side, n_pts)
    v = rng.uniform(0, side, n_pts)
    z = rng.uniform(0.5, 1.0, n_pts)
    n_corr = 300 if quick else 1500
    src = rng.normal(size=(n_corr, 3))
    dst = src + rng.normal(scale=0.01, size=src.shape)
    mats = rng.normal(size=(2000 if quick else 20000, 3, 3))
    mats = mats + mats.transpose(0, 2, 1)
    return {
        "splat_zbuffer": lambda k: k.splat_zbuffer(u, v, z, side, side, 1, 0.03),
        "compatibility_matrix": lambda k: k.compatibility_matrix(src, dst, 0.02),
        "sym3_eigh": lambda k: [k.sym3_eigh(m) for m in mats[:2000 if quick else 5000]],
    }


def best_time(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def run(repeat: int = 5, quick: bool = False):
    rows = []
    for name, call in cases(quick).items():
        t_py = best_time(lambda: call(_pykernels), repeat)
        t_c = best_time(lambda: call(_ckernels), repeat) if _ckernels is not None else float("nan")
        rows.append((name, t_py, t_c))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="small inputs, for smoke runs")
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; only the numpy fallback is timed")
    print(f"{'kernel':<22}{'python (ms)':>12}{'cython (ms)':>13}{'speed-up':>10}")
    for name, t_py, t_c in run(args.repeat, args.quick):
        print(f"{name:<22}{1e3 * t_py:>12.2f}{1e3 * t_c:>13.2f}{t_py / t_c:>9.1f}x")


if __name__ == "__main__":
    main()
