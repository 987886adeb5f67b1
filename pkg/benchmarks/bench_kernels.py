#!/usr/bin/env python3
"""Benchmark the compiled im2col/col2im kernels against the numpy fallback.

Times the raw kernels and a full conv2d forward+backward on a few
training-representative shapes, then prints a per-shape speedup table.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import time

import numpy as np

from codlab.tensor import Tape, Tensor, conv2d, sum_all
from codlab.tensor import kernels

SHAPES = [
    # (label, N, Cin, H, W, Cout, k, stride, pad)
    ("texture-l1 96px", 4, 3, 96, 96, 64, 7, 2, 3),
    ("texture-l2 48px", 4, 64, 48, 48, 64, 3, 2, 1),
    ("backbone 24px", 4, 40, 24, 24, 112, 3, 2, 1),
    ("decoder 12px", 4, 16, 12, 12, 8, 3, 1, 1),
]


def time_call(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_backend(backend, repeat):
    kernels.use_backend(backend)
    rows = []
    rng = np.random.default_rng(0)
    for label, n, cin, h, w, cout, k, stride, pad in SHAPES:
        x = rng.standard_normal((n, cin, h, w)).astype(np.float32)
        wt = rng.standard_normal((cout, cin, k, k)).astype(np.float32) * 0.1
        ho = (h + 2 * pad - k) // stride + 1
        wo = (w + 2 * pad - k) // stride + 1

        t_im2col = time_call(lambda: kernels.im2col(x, k, stride, pad, ho, wo), repeat)
        cols = kernels.im2col(x, k, stride, pad, ho, wo)
        t_col2im = time_call(
            lambda: kernels.col2im(cols, x.shape, k, stride, pad, ho, wo), repeat
        )

        def fwd_bwd():
            xt = Tensor(x, requires_grad=True)
            wtt = Tensor(wt, requires_grad=True)
            with Tape() as tape:
                out = sum_all(conv2d(xt, wtt, stride=stride, pad=pad))
                tape.backward(out)

        t_conv = time_call(fwd_bwd, repeat)
        rows.append((label, t_im2col, t_col2im, t_conv))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5, help="timing repetitions (best-of)")
    args = ap.parse_args()

    available = kernels.available_backends()
    print(f"available backends: {', '.join(available)}")
    results = {b: bench_backend(b, args.repeat) for b in available}
    kernels.use_backend("auto")

    header = f"{'shape':<18} {'kernel':<8}" + "".join(f" {b:>12}" for b in available)
    if len(available) > 1:
        header += f" {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for i, (label, *_rest) in enumerate(results[available[0]]):
        for j, kind in enumerate(("im2col", "col2im", "conv f+b")):
            times = [results[b][i][j + 1] for b in available]
            line = f"{label if j == 0 else '':<18} {kind:<8}"
            line += "".join(f" {t * 1e3:>10.3f}ms" for t in times)
            if len(times) > 1:
                line += f" {times[0] / times[-1]:>8.2f}x"
            print(line)


if __name__ == "__main__":
    main()
