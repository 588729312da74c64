"""Time the numba and numpy image kernels on catalog-sized inputs.

Run: python3 benchmarks/bench_kernels.py [--size 64] [--repeat 200]
"""

import argparse
import timeit

import numpy as np

from macl import _kernels


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    img = np.random.default_rng(0).uniform(0, 255, size=(args.size, args.size, 3))
    k = _kernels.gaussian_kernel3(1.0)
    cases = {
        "grid_stats": (lambda: _kernels.grid_stats_numpy(img, 4), lambda: _kernels.grid_stats_numba(img, 4)),
        "blur3": (lambda: _kernels.blur3_numpy(img, k), lambda: _kernels.blur3_numba(img, k)),
        "maxpool2": (lambda: _kernels.maxpool2_numpy(img), lambda: _kernels.maxpool2_numba(img)),
    }
    print(f"image {args.size}x{args.size}x3, {args.repeat} calls each, active backend: {_kernels.backend()}")
    print(f"{'kernel':<12}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, (np_fn, nb_fn) in cases.items():
        if not _kernels.HAVE_NUMBA:
            nb_fn = None
        else:
            nb_fn()  # compile outside the timed region
        t_np = timeit.timeit(np_fn, number=args.repeat) / args.repeat * 1e6
        t_nb = timeit.timeit(nb_fn, number=args.repeat) / args.repeat * 1e6 if nb_fn else float("nan")
        print(f"{name:<12}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
