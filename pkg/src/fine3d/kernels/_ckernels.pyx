# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row kernels for softmax, layernorm and tanh-GELU."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, tanh

cnp.import_array()

cdef double GELU_C = 0.7978845608028654


def softmax_fwd(double[:, ::1] x):
    cdef Py_ssize_t r, j, R = x.shape[0], n = x.shape[1]
    out = np.empty((R, n), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double m, s
    for r in range(R):
        m = x[r, 0]
        for j in range(1, n):
            if x[r, j] > m:
                m = x[r, j]
        s = 0.0
        for j in range(n):
            y[r, j] = exp(x[r, j] - m)
            s += y[r, j]
        for j in range(n):
            y[r, j] = y[r, j] / s
    return out


def softmax_bwd(double[:, ::1] y, double[:, ::1] g):
    cdef Py_ssize_t r, j, R = y.shape[0], n = y.shape[1]
    out = np.empty((R, n), dtype=np.float64)
    cdef double[:, ::1] gx = out
    cdef double s
    for r in range(R):
        s = 0.0
        for j in range(n):
            s += g[r, j] * y[r, j]
        for j in range(n):
            gx[r, j] = y[r, j] * (g[r, j] - s)
    return out


def layernorm_fwd(double[:, ::1] x, double eps):
    cdef Py_ssize_t r, j, R = x.shape[0], n = x.shape[1]
    out = np.empty((R, n), dtype=np.float64)
    rs = np.empty(R, dtype=np.float64)
    cdef double[:, ::1] xh = out
    cdef double[::1] rstd = rs
    cdef double mu, var, d
    for r in range(R):
        mu = 0.0
        for j in range(n):
            mu += x[r, j]
        mu = mu / n
        var = 0.0
        for j in range(n):
            d = x[r, j] - mu
            var += d * d
        rstd[r] = 1.0 / sqrt(var / n + eps)
        for j in range(n):
            xh[r, j] = (x[r, j] - mu) * rstd[r]
    return out, rs


def layernorm_bwd(double[:, ::1] gxhat, double[:, ::1] xhat, double[::1] rstd):
    cdef Py_ssize_t r, j, R = xhat.shape[0], n = xhat.shape[1]
    out = np.empty((R, n), dtype=np.float64)
    cdef double[:, ::1] gx = out
    cdef double a, b, k
    for r in range(R):
        a = 0.0
        b = 0.0
        for j in range(n):
            a += gxhat[r, j]
            b += gxhat[r, j] * xhat[r, j]
        k = rstd[r] / n
        for j in range(n):
            gx[r, j] = k * (n * gxhat[r, j] - a - xhat[r, j] * b)
    return out


def gelu_fwd(double[:, ::1] x):
    cdef Py_ssize_t r, j, R = x.shape[0], n = x.shape[1]
    out = np.empty((R, n), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double v
    for r in range(R):
        for j in range(n):
            v = x[r, j]
            y[r, j] = 0.5 * v * (1.0 + tanh(GELU_C * (v + 0.044715 * v * v * v)))
    return out


def gelu_bwd(double[:, ::1] x, double[:, ::1] g):
    cdef Py_ssize_t r, j, R = x.shape[0], n = x.shape[1]
    out = np.empty((R, n), dtype=np.float64)
    cdef double[:, ::1] gx = out
    cdef double v, t
    for r in range(R):
        for j in range(n):
            v = x[r, j]
            t = tanh(GELU_C * (v + 0.044715 * v * v * v))
            gx[r, j] = g[r, j] * (0.5 * (1.0 + t)
                                  + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 0.134145 * v * v))
    return out
