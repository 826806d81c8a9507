"""Compare the compiled convolution kernels against the NumPy fallback.

Usage:
    python benchmarks/bench_kernels.py [--repeats 20]

Times forward, input-gradient, and weight-gradient kernels on a few shapes
covering the desk-scale CNN plus a couple of heavier loads.
"""

import argparse
import timeit

import numpy as np

from sqakd.kernels import fallback

try:
    from sqakd.kernels import _ckernels
except ImportError:
    _ckernels = None

SHAPES = [
    # (label, x shape, w shape, stride, padding)
    ("cnn-small", (16, 1, 8, 8), (8, 1, 3, 3), 1, 1),
    ("cnn-mid", (32, 8, 16, 16), (16, 8, 3, 3), 1, 1),
    ("cnn-large", (16, 16, 32, 32), (32, 16, 3, 3), 1, 1),
    ("strided", (16, 8, 32, 32), (16, 8, 5, 5), 2, 2),
]


def time_call(fn, repeats):
    best = min(timeit.repeat(fn, number=1, repeat=repeats))
    return best * 1e3  # ms


def bench(repeats: int) -> None:
    if _ckernels is None:
        print("compiled kernels unavailable; build with `pip install -e . --no-build-isolation`")
        return

    rng = np.random.Generator(np.random.PCG64(0))
    header = f"{'case':<12} {'op':<9} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for label, x_shape, w_shape, stride, padding in SHAPES:
        x = rng.standard_normal(x_shape).astype(np.float32)
        w = rng.standard_normal(w_shape).astype(np.float32)
        y = fallback.conv2d_forward(x, w, stride, padding)
        gy = rng.standard_normal(y.shape).astype(np.float32)

        cases = [
            ("forward", lambda m: m.conv2d_forward(x, w, stride, padding)),
            ("grad-in", lambda m: m.conv2d_backward_input(gy, w, x.shape, stride, padding)),
            ("grad-wgt", lambda m: m.conv2d_backward_weight(gy, x, w.shape, stride, padding)),
        ]
        for op, call in cases:
            a, b = call(fallback), call(_ckernels)
            np.testing.assert_allclose(a, b, rtol=1e-3, atol=1e-3 * float(np.abs(a).max()))
            t_np = time_call(lambda: call(fallback), repeats)
            t_cy = time_call(lambda: call(_ckernels), repeats)
            print(f"{label:<12} {op:<9} {t_np:>10.3f} {t_cy:>10.3f} {t_np / t_cy:>7.2f}x")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    bench(parser.parse_args().repeats)
