"""Time the numba kernels against the pure-numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs once untimed (to trigger JIT compilation), then the best
of ``--repeat`` runs is reported for both backends.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from cmestorm.kernels import JIT_KERNELS, NUMPY_KERNELS


def _best(fn, repeat: int) -> float:
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng: np.random.Generator):
    x = rng.standard_normal((32, 8, 8, 256)).astype(np.float32)
    cols = rng.standard_normal((32 * 64, 9 * 256)).astype(np.float32)
    img = rng.random((1024, 1024, 1))
    n = 16384 * 1024
    y = rng.integers(0, 2, 5000)
    p = rng.random(5000)
    th = np.round(np.arange(1, 20) * 0.05, 2)

    def adam(k):
        param = np.zeros(n, np.float32)
        grad = rng.standard_normal(n).astype(np.float32)
        m = np.zeros_like(param)
        v = np.zeros_like(param)
        return lambda: k.adam_step(param, grad, m, v, 1e-4, 0.9, 0.999, 1e-8, 1)

    return {
        "im2col3x3 (32x8x8x256)": lambda k: (lambda: k.im2col3x3(x)),
        "col2im3x3 (32x8x8x256)": lambda k: (lambda: k.col2im3x3(cols, 32, 8, 8, 256)),
        "resize_bilinear 1024->256": lambda k: (lambda: k.resize_bilinear(img, 256, 256)),
        "adam_step (16.7M params)": adam,
        "sweep_counts (5000 x 19)": lambda k: (lambda: k.sweep_counts(y, p, th)),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    if JIT_KERNELS is None:
        print("numba unavailable; only the numpy backend can run")
    print(f"{'kernel':30s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, make in cases(rng).items():
        t_np = _best(make(NUMPY_KERNELS), args.repeat) * 1e3
        if JIT_KERNELS is None:
            print(f"{name:30s} {t_np:10.2f} {'-':>10s} {'-':>8s}")
            continue
        t_nb = _best(make(JIT_KERNELS), args.repeat) * 1e3
        print(f"{name:30s} {t_np:10.2f} {t_nb:10.2f} {t_np / t_nb:7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
