"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 3] [--ward-n 3000]

Prints one line per kernel with the best-of-``repeat`` wall time of each
backend and the speed-up.
"""

import argparse
import time

import numpy as np

from caemle import _fallback

try:
    from caemle import _kernels
except ImportError:
    _kernels = None


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(ward_n):
    rng = np.random.default_rng(0)
    # gradient scatter of the first conv stage on a USPS-sized batch
    cols = rng.standard_normal((256, 32, 8, 8, 5, 5))
    yield ("col2im 256x32x8x8 k5 s2",
           lambda: _fallback.col2im(cols, (256, 32, 19, 19), (5, 5), 2),
           lambda: _kernels.col2im(cols, (256, 32, 19, 19), (5, 5), 2))
    pts = rng.standard_normal((ward_n, 10))
    yield (f"nn_chain_ward {ward_n}x10",
           lambda: _fallback.nn_chain_ward(pts),
           lambda: _kernels.nn_chain_ward(pts))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--ward-n", type=int, default=3000)
    args = parser.parse_args(argv)
    if _kernels is None:
        print("compiled kernels are not built; run `pip install --no-build-isolation -e .` first")
        return 1
    print(f"{'kernel':<28} {'python[s]':>10} {'compiled[s]':>12} {'speed-up':>9}")
    for name, slow, fast in cases(args.ward_n):
        ts = best_time(slow, args.repeat)
        tf = best_time(fast, args.repeat)
        print(f"{name:<28} {ts:>10.3f} {tf:>12.3f} {ts / tf:>8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
