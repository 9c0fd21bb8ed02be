# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise kernels.

Every function mirrors a numpy routine in ``earlybird._fallback`` with the
same signature. Inputs are C-contiguous 2-D arrays whose last axis is the
reduction axis.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

ctypedef fused real:
    float
    double


def softmax_forward(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out = np.empty((n, d), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] y = out
    cdef double m, s, e
    with nogil:
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(d):
                e = exp(x[i, j] - m)
                y[i, j] = <real>e
                s += e
            for j in range(d):
                y[i, j] = <real>(y[i, j] / s)
    return out


def softmax_backward(real[:, ::1] y, real[:, ::1] g):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    out = np.empty((n, d), dtype=np.asarray(y).dtype)
    cdef real[:, ::1] dx = out
    cdef double dot
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += g[i, j] * y[i, j]
            for j in range(d):
                dx[i, j] = <real>(y[i, j] * (g[i, j] - dot))
    return out


def layer_norm_forward(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.asarray(x).dtype
    out = np.empty((n, d), dtype=dtype)
    xhat_arr = np.empty((n, d), dtype=dtype)
    rstd_arr = np.empty(n, dtype=dtype)
    cdef real[:, ::1] y = out
    cdef real[:, ::1] xhat = xhat_arr
    cdef real[::1] rstd = rstd_arr
    cdef double mean, var, r, t
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean += x[i, j]
            mean /= d
            var = 0.0
            for j in range(d):
                t = x[i, j] - mean
                var += t * t
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = <real>r
            for j in range(d):
                t = (x[i, j] - mean) * r
                xhat[i, j] = <real>t
                y[i, j] = <real>(t * gamma[j] + beta[j])
    return out, xhat_arr, rstd_arr


def layer_norm_backward(real[:, ::1] g, real[:, ::1] xhat, real[::1] rstd, real[::1] gamma):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    dtype = np.asarray(g).dtype
    dx_arr = np.empty((n, d), dtype=dtype)
    # accumulate parameter grads in double regardless of input precision
    dgamma_acc = np.zeros(d, dtype=np.float64)
    dbeta_acc = np.zeros(d, dtype=np.float64)
    cdef real[:, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_acc
    cdef double[::1] dbeta = dbeta_acc
    cdef double s1, s2, gh
    with nogil:
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                gh = g[i, j] * gamma[j]
                s1 += gh
                s2 += gh * xhat[i, j]
                dgamma[j] += g[i, j] * xhat[i, j]
                dbeta[j] += g[i, j]
            s1 /= d
            s2 /= d
            for j in range(d):
                gh = g[i, j] * gamma[j]
                dx[i, j] = <real>(rstd[i] * (gh - s1 - xhat[i, j] * s2))
    return dx_arr, dgamma_acc.astype(dtype), dbeta_acc.astype(dtype)


def pairwise_hamming(cnp.uint8_t[:, ::1] bits):
    cdef Py_ssize_t n = bits.shape[0], d = bits.shape[1], i, j, k
    out = np.zeros((n, n), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] h = out
    cdef cnp.int64_t c
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                c = 0
                for k in range(d):
                    if bits[i, k] != bits[j, k]:
                        c += 1
                h[i, j] = c
                h[j, i] = c
    return out
