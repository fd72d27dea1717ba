"""Time the numpy and numba kernel backends on production-sized inputs.

Usage: python benchmarks/bench_kernels.py [--nodes 207] [--batch 64] [--repeat 3]

Both backends are imported directly, so PGCN_DISABLE_NUMBA has no effect here.
Each timing is the best of ``--repeat`` runs after one warm-up call, which
also triggers numba compilation.
"""
import argparse
import time

import numpy as np

from pgcn._accel import numba_kernels, numpy_kernels


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def cases(nodes, batch, rng):
    D, T = 32, 13
    x = rng.normal(size=(batch * nodes, T, D))
    w = rng.normal(size=(2, D, D))
    g = rng.normal(size=(batch * nodes, T - 2, D))
    scores = rng.normal(size=(batch, nodes, nodes))
    windows = rng.normal(size=(batch, nodes, 12))
    p, grad = rng.normal(size=100_000), rng.normal(size=100_000)
    m, v = np.zeros_like(p), np.zeros_like(p)
    return {
        "conv forward": lambda k: k.conv_forward(x, w, 2),
        "conv backward": lambda k: k.conv_backward(x, w, 2, g),
        "gated forward": lambda k: k.gated_forward(x, x),
        "row softmax": lambda k: k.softmax(scores),
        "normalize windows": lambda k: k.normalize_rows(windows),
        "adam update": lambda k: k.adam_update(p, grad, m, v, 1e-3, 0.9, 0.999, 1e-8, 1),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--nodes", type=int, default=207)
    parser.add_argument("--batch", type=int, default=64)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy s':>10}{'numba s':>10}{'speedup':>10}")
    for name, fn in cases(args.nodes, args.batch, rng).items():
        a = best_of(lambda: fn(numpy_kernels), args.repeat)
        b = best_of(lambda: fn(numba_kernels), args.repeat)
        print(f"{name:<20}{a:>10.4f}{b:>10.4f}{a / b:>9.2f}x")


if __name__ == "__main__":
    main()
