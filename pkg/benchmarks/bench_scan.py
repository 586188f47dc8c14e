"""Timing comparison of the two scan-kernel backends.

Runs the fused forward and backward recurrences over a grid of sizes with
the compiled (numba) and the per-step numpy implementations and prints a
table of medians plus the speedup. The two backends are also checked
against each other here, since a fast wrong kernel would be worse than no
kernel.

Usage: python3 benchmarks/bench_scan.py [--repeats 7]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from sormamba.scan_kernels import (
    scan_backward_numba,
    scan_backward_numpy,
    scan_forward_numba,
    scan_forward_numpy,
)

SIZES = [
    # batch, steps, dim, state
    (32, 8, 128, 16),  # channel-token shape: short scans, wide dims
    (32, 32, 128, 16),
    (8, 96, 256, 16),
    (64, 8, 512, 16),  # large-model shape
]


def make_case(batch, steps, dim, state, seed):
    rng = np.random.default_rng(seed)
    a_bar = rng.uniform(0.2, 0.95, size=(batch, steps, dim, state))
    b_bar = rng.normal(size=(batch, steps, dim, state)) * 0.1
    c = rng.normal(size=(batch, steps, state))
    x = rng.normal(size=(batch, steps, dim))
    gy = rng.normal(size=(batch, steps, dim))
    return a_bar, b_bar, c, x, gy


def median_seconds(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=7)
    args = parser.parse_args()

    # compile outside the timers
    warm = make_case(1, 4, 8, 4, 0)
    y, hs = scan_forward_numba(*warm[:4])
    scan_backward_numba(*warm[:4], hs, warm[4])

    print(f"{'size (B,S,D,N)':>22} {'pass':>8} {'numba':>10} {'numpy':>10} {'speedup':>8}")
    for size in SIZES:
        a_bar, b_bar, c, x, gy = make_case(*size, seed=42)

        y_nb, hs_nb = scan_forward_numba(a_bar, b_bar, c, x)
        y_np, hs_np = scan_forward_numpy(a_bar, b_bar, c, x)
        assert np.max(np.abs(y_nb - y_np)) < 1e-12, "backends disagree on forward"
        grads_nb = scan_backward_numba(a_bar, b_bar, c, x, hs_nb, gy)
        grads_np = scan_backward_numpy(a_bar, b_bar, c, x, hs_np, gy)
        for g_nb, g_np in zip(grads_nb, grads_np):
            assert np.max(np.abs(g_nb - g_np)) < 1e-12, "backends disagree on backward"

        fwd_nb = median_seconds(lambda: scan_forward_numba(a_bar, b_bar, c, x), args.repeats)
        fwd_np = median_seconds(lambda: scan_forward_numpy(a_bar, b_bar, c, x), args.repeats)
        bwd_nb = median_seconds(
            lambda: scan_backward_numba(a_bar, b_bar, c, x, hs_nb, gy), args.repeats
        )
        bwd_np = median_seconds(
            lambda: scan_backward_numpy(a_bar, b_bar, c, x, hs_np, gy), args.repeats
        )
        label = str(size)
        print(f"{label:>22} {'forward':>8} {fwd_nb*1e3:9.2f}ms {fwd_np*1e3:9.2f}ms {fwd_np/fwd_nb:7.1f}x")
        print(f"{'':>22} {'backward':>8} {bwd_nb*1e3:9.2f}ms {bwd_np*1e3:9.2f}ms {bwd_np/bwd_nb:7.1f}x")


if __name__ == "__main__":
    main()
