# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the numpy kernel backend.

Semantics must match `_numpy_backend` exactly (up to floating-point
summation order); the parity test suite enforces this.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

cdef double NORM_FLOOR = 1e-30


def sqdist(double[:, ::1] x, double[:, ::1] p):
    cdef Py_ssize_t m = x.shape[0], n = p.shape[0], d = x.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, k
    cdef double acc, diff
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for k in range(d):
                diff = x[i, k] - p[j, k]
                acc += diff * diff
            o[i, j] = acc
    return out


def sqdist_bwd(double[:, ::1] x, double[:, ::1] p, double[:, ::1] g):
    cdef Py_ssize_t m = x.shape[0], n = p.shape[0], d = x.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dxa = np.zeros((m, d), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dpa = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] dx = dxa
    cdef double[:, ::1] dp = dpa
    cdef Py_ssize_t i, j, k
    cdef double gij, t
    for i in range(m):
        for j in range(n):
            gij = 2.0 * g[i, j]
            if gij == 0.0:
                continue
            for k in range(d):
                t = gij * (x[i, k] - p[j, k])
                dx[i, k] += t
                dp[j, k] -= t
    return dxa, dpa


cdef void _norms(double[:, ::1] a, double[::1] out) noexcept:
    cdef Py_ssize_t i, k
    cdef double acc
    for i in range(a.shape[0]):
        acc = 0.0
        for k in range(a.shape[1]):
            acc += a[i, k] * a[i, k]
        acc = sqrt(acc)
        out[i] = acc if acc > NORM_FLOOR else NORM_FLOOR


def cos_rows(double[:, ::1] x, double[:, ::1] p):
    cdef Py_ssize_t m = x.shape[0], n = p.shape[0], d = x.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[::1] nx = np.empty(m, dtype=np.float64)
    cdef double[::1] np_ = np.empty(n, dtype=np.float64)
    _norms(x, nx)
    _norms(p, np_)
    cdef Py_ssize_t i, j, k
    cdef double acc
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for k in range(d):
                acc += x[i, k] * p[j, k]
            o[i, j] = acc / (nx[i] * np_[j])
    return out


def cos_rows_bwd(double[:, ::1] x, double[:, ::1] p, double[:, ::1] c,
                 double[:, ::1] g):
    cdef Py_ssize_t m = x.shape[0], n = p.shape[0], d = x.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dxa = np.zeros((m, d), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dpa = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] dx = dxa
    cdef double[:, ::1] dp = dpa
    cdef double[::1] nx = np.empty(m, dtype=np.float64)
    cdef double[::1] np_ = np.empty(n, dtype=np.float64)
    _norms(x, nx)
    _norms(p, np_)
    cdef Py_ssize_t i, j, k
    cdef double gij, inv, cx, cp
    for i in range(m):
        for j in range(n):
            gij = g[i, j]
            if gij == 0.0:
                continue
            inv = gij / (nx[i] * np_[j])
            cx = gij * c[i, j] / (nx[i] * nx[i])
            cp = gij * c[i, j] / (np_[j] * np_[j])
            for k in range(d):
                dx[i, k] += inv * p[j, k] - cx * x[i, k]
                dp[j, k] += inv * x[i, k] - cp * p[j, k]
    return dxa, dpa


def row_softmax(double[:, ::1] s):
    cdef Py_ssize_t m = s.shape[0], n = s.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double mx, tot
    for i in range(m):
        mx = s[i, 0]
        for j in range(1, n):
            if s[i, j] > mx:
                mx = s[i, j]
        tot = 0.0
        for j in range(n):
            o[i, j] = exp(s[i, j] - mx)
            tot += o[i, j]
        for j in range(n):
            o[i, j] /= tot
    return out
