"""Compare the compiled and NumPy convolution kernels.

Usage::

    python3 benchmarks/bench_kernels.py [--batch 64] [--repeat 5]

Prints the best-of-N wall time per kernel and backend, plus the speedup of
the compiled kernels, for a small LeNet-style first layer (1 -> 6 channels,
5x5 kernel on 28x28 inputs) and a second layer (6 -> 16 channels).
"""

import argparse
import time

import numpy as np

from incop import _kernels_py

try:
    from incop import _kernels
except ImportError:  # extension not built
    _kernels = None

KERNELS = ("conv2d_forward", "conv2d_backward_input", "conv2d_backward_weight")


def workload(batch, c_in, c_out, size, k, rng):
    x = rng.standard_normal((batch, c_in, size, size))
    w = rng.standard_normal((c_out, c_in, k, k))
    dout = rng.standard_normal((batch, c_out, size - k + 1, size - k + 1))
    return {
        "conv2d_forward": (x, w),
        "conv2d_backward_input": (dout, w, size, size),
        "conv2d_backward_weight": (dout, x, k, k),
    }


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - start)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--batch", type=int, default=64)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    shapes = {"1->6 28x28 k5": (1, 6, 28, 5), "6->16 12x12 k5": (6, 16, 12, 5)}
    print(f"{'layer':<16} {'kernel':<24} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for label, (c_in, c_out, size, k) in shapes.items():
        for name, fargs in workload(args.batch, c_in, c_out, size, k, rng).items():
            py = best_of(getattr(_kernels_py, name), fargs, args.repeat)
            if _kernels is None:
                print(f"{label:<16} {name:<24} {py * 1e3:10.2f} {'n/a':>10} {'':>8}")
                continue
            cy = best_of(getattr(_kernels, name), fargs, args.repeat)
            np.testing.assert_allclose(getattr(_kernels, name)(*fargs),
                                       getattr(_kernels_py, name)(*fargs), rtol=1e-10, atol=1e-9)
            print(f"{label:<16} {name:<24} {py * 1e3:10.2f} {cy * 1e3:10.2f} {py / cy:7.2f}x")


if __name__ == "__main__":
    main()
