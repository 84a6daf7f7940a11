# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Summation orders mirror ``_pykernels`` exactly."""

import numpy as np
from libc.math cimport sqrt


def matmul(const double[:, :] a, const double[:, :] b):
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], m = b.shape[1]
    cdef Py_ssize_t i, t, j
    cdef double aval
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            for t in range(k):
                aval = a[i, t]
                for j in range(m):
                    out[i, j] = out[i, j] + aval * b[t, j]
    return out_arr


def rowdot(const double[:, :] a, const double[:, :] b):
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1]
    cdef Py_ssize_t i, t
    cdef double acc
    out_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            acc = 0.0
            for t in range(k):
                acc = acc + a[i, t] * b[i, t]
            out[i] = acc
    return out_arr


def segment_sum(const long long[:] indptr, const long long[:] indices, const double[:, :] x):
    cdef Py_ssize_t nseg = indptr.shape[0] - 1
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t s, j, c
    cdef long long row
    if nseg < 0:
        nseg = 0
    out_arr = np.zeros((nseg, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for s in range(nseg):
            for j in range(indptr[s], indptr[s + 1]):
                row = indices[j]
                for c in range(d):
                    out[s, c] = out[s, c] + x[row, c]
    return out_arr


def scatter_add_rows(double[:, :] target, const long long[:] indices, const double[:, :] rows):
    cdef Py_ssize_t n = indices.shape[0], d = target.shape[1]
    cdef Py_ssize_t j, c
    cdef long long row
    with nogil:
        for j in range(n):
            row = indices[j]
            for c in range(d):
                target[row, c] = target[row, c] + rows[j, c]


def adam_update(double[::1] value, const double[::1] grad, double[::1] m, double[::1] v,
                double lr, double beta1, double one_minus_beta1, double beta2,
                double one_minus_beta2, double bc1, double bc2, double eps):
    cdef Py_ssize_t n = value.shape[0], i
    cdef double g
    with nogil:
        for i in range(n):
            g = grad[i]
            m[i] = m[i] * beta1 + one_minus_beta1 * g
            v[i] = v[i] * beta2 + one_minus_beta2 * (g * g)
            value[i] = value[i] - lr * (m[i] / bc1) / (sqrt(v[i] / bc2) + eps)
