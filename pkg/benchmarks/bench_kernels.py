"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints the median wall time per call for each kernel and backend, plus the
speed-up of the compiled version. Runs single-threaded.
"""

import argparse
import time

import numpy as np
from threadpoolctl import threadpool_limits

from topotraj.kernels import _fallback

try:
    from topotraj.kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _median_time(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def cases(rng):
    x = rng.standard_normal((8, 48, 40, 40)).astype(np.float32)
    cols = rng.standard_normal((8, 48 * 9, 40 * 40)).astype(np.float32)
    n = 24000
    rows = rng.integers(0, 160, n)
    cc = rng.integers(0, 160, n)
    z = rng.uniform(-2.5, 1.5, n)
    inten = rng.uniform(0, 1, n)
    px, py = np.arange(160.0), np.arange(160.0)  # row and column coordinates
    route = np.cumsum(rng.normal(0, 1, (70, 2)), axis=0) + 80
    ax, ay, bx, by = (np.ascontiguousarray(a) for a in (route[:-1, 0], route[:-1, 1], route[1:, 0], route[1:, 1]))
    return {
        "im2col 3x3 (8,48,40,40)": lambda m: m.im2col(x, 3, 1, 1),
        "col2im 3x3 (8,48,40,40)": lambda m: m.col2im(cols, x.shape, 3, 1, 1),
        "bev_accumulate 24k pts": lambda m: m.bev_accumulate(rows, cc, z, inten, 160, 160),
        "segment mask 160x160, 69 segs": lambda m: m.segment_distance_mask(px, py, ax, ay, bx, by, 2.0),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'numpy ms':>10s} {'cython ms':>10s} {'speed-up':>9s}")
    with threadpool_limits(1):
        for name, fn in cases(rng).items():
            t_py = _median_time(lambda: fn(_fallback), args.repeat) * 1e3
            if _ckernels is None:
                print(f"{name:34s} {t_py:10.3f} {'n/a':>10s} {'':>9s}")
                continue
            t_c = _median_time(lambda: fn(_ckernels), args.repeat) * 1e3
            print(f"{name:34s} {t_py:10.3f} {t_c:10.3f} {t_py / t_c:8.2f}x")


if __name__ == "__main__":
    main()
