# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Must stay bit-compatible with ``_fallback``."""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


cdef inline Py_ssize_t _lower_bound(const double[::1] values, Py_ssize_t lo,
                                    Py_ssize_t hi, double q) noexcept nogil:
    cdef Py_ssize_t mid
    while lo < hi:
        mid = lo + (hi - lo) // 2
        if values[mid] < q:
            lo = mid + 1
        else:
            hi = mid
    return lo


def count_geq(const double[::1] values, const cnp.int64_t[::1] offsets,
              const cnp.int64_t[::1] groups, const double[::1] queries):
    cdef Py_ssize_t m, n = queries.shape[0]
    cdef Py_ssize_t g, lo, hi
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] counts = out
    with nogil:
        for m in range(n):
            g = groups[m]
            lo = offsets[g]
            hi = offsets[g + 1]
            counts[m] = hi - _lower_bound(values, lo, hi, queries[m])
    return out


def level_argmin(const double[:, ::1] weights, const double[:, ::1] psi,
                 const double[:, :, ::1] neglogp, double lam):
    cdef Py_ssize_t C = weights.shape[0]
    cdef Py_ssize_t K = weights.shape[1]
    cdef Py_ssize_t N = psi.shape[0]
    cdef Py_ssize_t c, i, y, arg
    cdef double cost, best, total
    labels_arr = np.zeros((C, N), dtype=np.int64)
    totals_arr = np.zeros(C, dtype=np.float64)
    cdef cnp.int64_t[:, ::1] labels = labels_arr
    cdef double[::1] totals = totals_arr
    with nogil:
        for c in range(C):
            total = 0.0
            for i in range(N):
                best = INFINITY
                arg = 0
                for y in range(K):
                    cost = weights[c, y] * psi[i, y] + lam * neglogp[i, c, y]
                    if cost < best:
                        best = cost
                        arg = y
                labels[c, i] = arg
                total = total + best
            totals[c] = total
    return labels_arr, totals_arr
