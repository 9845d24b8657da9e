# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Signatures mirror ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

ctypedef fused real:
    float
    double


def gather_rows(real[:, ::1] table, const cnp.int64_t[::1] ids):
    cdef Py_ssize_t n = ids.shape[0], k = table.shape[1], i, j, r
    cdef Py_ssize_t rows = table.shape[0]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, k), dtype=dtype)
    cdef real[:, ::1] o = out
    for i in range(n):
        r = ids[i]
        if r < 0 or r >= rows:
            raise IndexError(f"row id {r} out of range for table with {rows} rows")
        for j in range(k):
            o[i, j] = table[r, j]
    return out


def scatter_add_rows(real[:, ::1] target, const cnp.int64_t[::1] ids, real[:, ::1] rows):
    cdef Py_ssize_t n = ids.shape[0], k = target.shape[1], i, j, r
    cdef Py_ssize_t nrows = target.shape[0]
    for i in range(n):
        r = ids[i]
        if r < 0 or r >= nrows:
            raise IndexError(f"row id {r} out of range for table with {nrows} rows")
        for j in range(k):
            target[r, j] += rows[i, j]


def layernorm_forward(real[:, ::1] x, double eps):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    cdef double mean, var, d, inv
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, k), dtype=dtype)
    inv_arr = np.empty(n, dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef real[::1] inv_std = inv_arr
    for i in range(n):
        mean = 0.0
        for j in range(k):
            mean += x[i, j]
        mean /= k
        var = 0.0
        for j in range(k):
            d = x[i, j] - mean
            var += d * d
        var /= k
        inv = 1.0 / sqrt(var + eps)
        inv_std[i] = <real>inv
        for j in range(k):
            y[i, j] = <real>((x[i, j] - mean) * inv)
    return y_arr, inv_arr


def layernorm_backward(real[:, ::1] dy, real[:, ::1] y, real[::1] inv_std):
    cdef Py_ssize_t n = dy.shape[0], k = dy.shape[1], i, j
    cdef double s1, s2
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((n, k), dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(k):
            s1 += dy[i, j]
            s2 += dy[i, j] * y[i, j]
        s1 /= k
        s2 /= k
        for j in range(k):
            dx[i, j] = <real>(inv_std[i] * (dy[i, j] - s1 - y[i, j] * s2))
    return dx_arr


def ranksum_positive(const double[::1] sorted_scores, const cnp.int8_t[::1] sorted_labels):
    """Sum of tie-averaged 1-based ranks of the positives in an ascending-sorted list."""
    cdef Py_ssize_t n = sorted_scores.shape[0], i = 0, j, m
    cdef double total = 0.0, avg
    cdef long npos
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        avg = 0.5 * (i + 1 + j + 1)
        npos = 0
        for m in range(i, j + 1):
            npos += sorted_labels[m]
        total += avg * npos
        i = j + 1
    return total
