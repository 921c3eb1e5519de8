"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel with the best-of-N time for each backend and the
speedup.  Inputs are shaped like the real workloads (S3 layer-1 pooling and
col2im at 64x64, LBP/HOG on a 256x256 grey patch).  The first numba call is
made before timing so JIT compilation is excluded.
"""

import argparse
import time

import numpy as np

from cellinspect import kernels
from cellinspect.baselines import _gradients


def workloads(rng):
    x = rng.normal(size=(8, 64, 64, 16)).astype(np.float32)
    _, arg = kernels.maxpool_forward_numpy(x)
    dout = rng.normal(size=(8, 32, 32, 16)).astype(np.float32)
    dcols = rng.normal(size=(4, 64, 64, 16, 5, 5)).astype(np.float32)
    gray = rng.uniform(0, 1, (256, 256))
    gx, gy = _gradients(gray)
    mag, ang = np.hypot(gx, gy), np.rad2deg(np.arctan2(gy, gx)) % 180.0
    return {
        "maxpool_forward": (x,),
        "maxpool_backward": (dout, arg),
        "col2im": (dcols, (4, 68, 68, 16), 1),
        "lbp_codes": (gray,),
        "hog_cells": (mag, ang, 8, 9),
    }


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if "numba" not in kernels.available_backends():
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for name, inputs in workloads(rng).items():
        ref, fast = kernels.get_kernel(name, "numpy"), kernels.get_kernel(name, "numba")
        a, b = ref(*inputs), fast(*inputs)  # also warms the JIT
        for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            np.testing.assert_allclose(u, v, rtol=1e-5, atol=1e-5)
        t_np = best_of(ref, inputs, args.repeat)
        t_nb = best_of(fast, inputs, args.repeat)
        print(f"{name:<18}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
