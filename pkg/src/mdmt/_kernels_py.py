"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def gather_rows(table, ids):
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        bad = ids[(ids < 0) | (ids >= rows)][0]
        raise IndexError(f"row id {bad} out of range for table with {rows} rows")
    return table[ids]


def scatter_add_rows(target, ids, rows):
    nrows = target.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= nrows):
        bad = ids[(ids < 0) | (ids >= nrows)][0]
        raise IndexError(f"row id {bad} out of range for table with {nrows} rows")
    np.add.at(target, ids, rows)


def layernorm_forward(x, eps):
    # statistics in float64 to track the compiled kernel
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=1, keepdims=True)
    var = ((x64 - mean) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = ((x64 - mean) * inv).astype(x.dtype)
    return y, inv[:, 0].astype(x.dtype)


def layernorm_backward(dy, y, inv_std):
    dy64 = dy.astype(np.float64)
    y64 = y.astype(np.float64)
    s1 = dy64.mean(axis=1, keepdims=True)
    s2 = (dy64 * y64).mean(axis=1, keepdims=True)
    dx = inv_std.astype(np.float64)[:, None] * (dy64 - s1 - y64 * s2)
    return dx.astype(dy.dtype)


def ranksum_positive(sorted_scores, sorted_labels):
    """Sum of tie-averaged 1-based ranks of the positives in an ascending-sorted list."""
    n = sorted_scores.shape[0]
    if n == 0:
        return 0.0
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    ends = np.r_[starts[1:], n]
    avg = 0.5 * (starts + 1 + ends)
    pos_per_group = np.add.reduceat(sorted_labels.astype(np.int64), starts)
    return float(np.dot(avg, pos_per_group))
