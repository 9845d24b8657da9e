"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from mdmt import _kernels_py

try:
    from mdmt import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def cases(rng):
    table = rng.standard_normal((20000, 16)).astype(np.float32)
    ids = rng.integers(0, 20000, size=4096).astype(np.int64)
    rows = rng.standard_normal((4096, 16)).astype(np.float32)
    x = rng.standard_normal((4096, 32)).astype(np.float32)
    y, inv = _kernels_py.layernorm_forward(x, 1e-5)
    y, inv = y.astype(np.float32), inv.astype(np.float32)
    dy = rng.standard_normal(x.shape).astype(np.float32)
    scores = np.sort(rng.random(200000))
    labels = (rng.random(200000) < 0.3).astype(np.int8)
    return {
        "gather_rows": lambda k: k.gather_rows(table, ids),
        "scatter_add_rows": lambda k: k.scatter_add_rows(np.zeros_like(table), ids, rows),
        "layernorm_forward": lambda k: k.layernorm_forward(x, 1e-5),
        "layernorm_backward": lambda k: k.layernorm_backward(dy, y, inv),
        "ranksum_positive": lambda k: k.ranksum_positive(scores, labels),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':20s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        py = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat)) * 1e3
        if _kernels_c is None:
            print(f"{name:20s} {py:10.3f} {'n/a':>10s} {'n/a':>8s}")
            continue
        cy = min(timeit.repeat(lambda: fn(_kernels_c), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:20s} {py:10.3f} {cy:10.3f} {py / cy:7.1f}x")


if __name__ == "__main__":
    main()
