# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the graph network: segment kNN, neighbourhood max and
segment max pooling.  Semantics mirror ``g3dm._kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def knn_segments(const double[:, ::1] x, const cnp.int64_t[::1] starts, int k):
    cdef Py_ssize_t n = x.shape[0], dim = x.shape[1]
    cdef Py_ssize_t nseg = starts.shape[0] - 1
    out_arr = np.empty((n, k), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_arr
    cdef double[::1] best_d = np.empty(k, dtype=np.float64)
    cdef cnp.int64_t[::1] best_i = np.empty(k, dtype=np.int64)
    cdef Py_ssize_t s, lo, hi, i, j, c, m, pos, kk, filled
    cdef double d, diff
    for s in range(nseg):
        lo = starts[s]
        hi = starts[s + 1]
        if hi - lo < 2:
            raise ValueError(f"segment {s} has fewer than 2 nodes")
        kk = k if k < hi - lo - 1 else hi - lo - 1
        for i in range(lo, hi):
            filled = 0
            for j in range(lo, hi):
                if j == i:
                    continue
                d = 0.0
                for c in range(dim):
                    diff = x[i, c] - x[j, c]
                    d += diff * diff
                # j increases, so a strict comparison keeps lower indices first on ties
                if filled < kk:
                    pos = filled
                    filled += 1
                elif d < best_d[kk - 1]:
                    pos = kk - 1
                else:
                    continue
                while pos > 0 and best_d[pos - 1] > d:
                    best_d[pos] = best_d[pos - 1]
                    best_i[pos] = best_i[pos - 1]
                    pos -= 1
                best_d[pos] = d
                best_i[pos] = j
            for m in range(kk):
                out[i, m] = best_i[m]
            for m in range(kk, k):
                out[i, m] = best_i[0]
    return out_arr


def gather_max(const double[:, ::1] x, const cnp.int64_t[:, ::1] nbr):
    cdef Py_ssize_t n = nbr.shape[0], k = nbr.shape[1], ch = x.shape[1]
    out_arr = np.empty((n, ch), dtype=np.float64)
    arg_arr = np.empty((n, ch), dtype=np.int64)
    cdef double[:, ::1] out = out_arr
    cdef cnp.int64_t[:, ::1] arg = arg_arr
    cdef Py_ssize_t i, m, c
    cdef cnp.int64_t j, a
    cdef double v, o
    cdef bint upd
    cdef const double* xr
    cdef double* orow
    cdef cnp.int64_t* arow
    if n == 0 or ch == 0:
        return out_arr, arg_arr
    for i in range(n):
        orow = &out[i, 0]
        arow = &arg[i, 0]
        j = nbr[i, 0]
        xr = &x[j, 0]
        for c in range(ch):
            orow[c] = xr[c]
            arow[c] = j
        for m in range(1, k):
            j = nbr[i, m]
            xr = &x[j, 0]
            for c in range(ch):
                # branchless select; ties go to the lower node index
                v = xr[c]
                o = orow[c]
                a = arow[c]
                upd = (v > o) | ((v == o) & (j < a))
                orow[c] = v if upd else o
                arow[c] = j if upd else a
    return out_arr, arg_arr


def scatter_add_rows(const double[:, ::1] grad, const cnp.int64_t[:, ::1] arg, Py_ssize_t n_rows):
    cdef Py_ssize_t n = grad.shape[0], ch = grad.shape[1]
    out_arr = np.zeros((n_rows, ch), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, c
    cdef double* base
    cdef const double* grow
    cdef const cnp.int64_t* arow
    if n == 0 or ch == 0 or n_rows == 0:
        return out_arr
    base = &out[0, 0]
    for i in range(n):
        grow = &grad[i, 0]
        arow = &arg[i, 0]
        for c in range(ch):
            base[arow[c] * ch + c] += grow[c]
    return out_arr


def segment_max(const double[:, ::1] x, const cnp.int64_t[::1] starts):
    cdef Py_ssize_t nseg = starts.shape[0] - 1, ch = x.shape[1]
    out_arr = np.empty((nseg, ch), dtype=np.float64)
    arg_arr = np.empty((nseg, ch), dtype=np.int64)
    cdef double[:, ::1] out = out_arr
    cdef cnp.int64_t[:, ::1] arg = arg_arr
    cdef Py_ssize_t s, i, c
    cdef double v
    for s in range(nseg):
        for c in range(ch):
            out[s, c] = -INFINITY
            arg[s, c] = starts[s]
        for i in range(starts[s], starts[s + 1]):
            for c in range(ch):
                v = x[i, c]
                if v > out[s, c]:
                    out[s, c] = v
                    arg[s, c] = i
    return out_arr, arg_arr
