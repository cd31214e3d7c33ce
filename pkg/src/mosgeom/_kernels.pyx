# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled mapping kernels.

Same contract as _kernels_py: row-batched primitives returning the first
guard-violating row (or -1). Each row is processed independently and its
summation order depends only on the row length, so single-row and batched
calls agree bitwise.
"""
import numpy as np

cimport cython
from libc.math cimport fabs, sqrt

GUARD = 1e-6
cdef double _GUARD = 1e-6

ctypedef fused floating:
    float
    double


cdef inline object _dtype_of(floating x):
    if floating is float:
        return np.float32
    return np.float64


cdef inline floating _row_sq_sum(floating[:, ::1] x, Py_ssize_t i) noexcept:
    # eight independent partial sums; a single accumulator serialises on the
    # add latency and then float and double run at the same (slow) speed
    cdef Py_ssize_t n = x.shape[1], j = 0
    cdef floating a0 = 0, a1 = 0, a2 = 0, a3 = 0
    cdef floating a4 = 0, a5 = 0, a6 = 0, a7 = 0
    while j + 8 <= n:
        a0 += x[i, j] * x[i, j]
        a1 += x[i, j + 1] * x[i, j + 1]
        a2 += x[i, j + 2] * x[i, j + 2]
        a3 += x[i, j + 3] * x[i, j + 3]
        a4 += x[i, j + 4] * x[i, j + 4]
        a5 += x[i, j + 5] * x[i, j + 5]
        a6 += x[i, j + 6] * x[i, j + 6]
        a7 += x[i, j + 7] * x[i, j + 7]
        j += 8
    while j < n:
        a0 += x[i, j] * x[i, j]
        j += 1
    return ((a0 + a1) + (a2 + a3)) + ((a4 + a5) + (a6 + a7))


cdef inline floating _row_dot(floating[:, ::1] x, floating[:, ::1] y,
                              Py_ssize_t i) noexcept:
    # same striping as _row_sq_sum, for <x[i], y[i]>
    cdef Py_ssize_t n = x.shape[1], j = 0
    cdef floating a0 = 0, a1 = 0, a2 = 0, a3 = 0
    cdef floating a4 = 0, a5 = 0, a6 = 0, a7 = 0
    while j + 8 <= n:
        a0 += x[i, j] * y[i, j]
        a1 += x[i, j + 1] * y[i, j + 1]
        a2 += x[i, j + 2] * y[i, j + 2]
        a3 += x[i, j + 3] * y[i, j + 3]
        a4 += x[i, j + 4] * y[i, j + 4]
        a5 += x[i, j + 5] * y[i, j + 5]
        a6 += x[i, j + 6] * y[i, j + 6]
        a7 += x[i, j + 7] * y[i, j + 7]
        j += 8
    while j < n:
        a0 += x[i, j] * y[i, j]
        j += 1
    return ((a0 + a1) + (a2 + a3)) + ((a4 + a5) + (a6 + a7))


def rownorm2(floating[:, ::1] x):
    cdef Py_ssize_t B = x.shape[0], i
    out_arr = np.empty(B, dtype=_dtype_of(<floating> 0))
    cdef floating[::1] out = out_arr
    for i in range(B):
        out[i] = _row_sq_sum(x, i)
    return out_arr


def inv_stereo(floating[:, ::1] x, double kappa):
    cdef Py_ssize_t B = x.shape[0], n = x.shape[1], i, j
    cdef Py_ssize_t bad = -1
    cdef floating k = <floating> kappa
    cdef floating sk = <floating> sqrt(fabs(kappa))
    cdef floating acc, den, c
    dt = _dtype_of(<floating> 0)
    xi_arr = np.empty(B, dtype=dt)
    s_arr = np.empty((B, n), dtype=dt)
    t_arr = np.empty(B, dtype=dt)
    cdef floating[::1] xi = xi_arr
    cdef floating[:, ::1] s = s_arr
    cdef floating[::1] t = t_arr
    for i in range(B):
        acc = _row_sq_sum(x, i)
        t[i] = acc
        den = 1 + k * acc
        if fabs(den) < _GUARD and bad < 0:
            bad = i
        xi[i] = (1 - k * acc) / (sk * den)
        c = 2 / den
        for j in range(n):
            s[i, j] = c * x[i, j]
    return xi_arr, s_arr, t_arr, bad


def lift_xi(floating[:, ::1] s, double sgn_neg, double phi):
    cdef Py_ssize_t B = s.shape[0], n = s.shape[1], i, j
    cdef Py_ssize_t bad = -1
    cdef floating sg = <floating> sgn_neg
    cdef floating ph = <floating> phi
    cdef floating acc, rad
    dt = _dtype_of(<floating> 0)
    xi_arr = np.empty(B, dtype=dt)
    q_arr = np.empty(B, dtype=dt)
    cdef floating[::1] xi = xi_arr
    cdef floating[::1] q = q_arr
    for i in range(B):
        acc = _row_sq_sum(s, i)
        q[i] = acc
        rad = sg * acc + ph
        if rad < 0 and bad < 0:
            bad = i
        xi[i] = <floating> sqrt(rad)
    return xi_arr, q_arr, bad


def stereo(floating[::1] xi, floating[:, ::1] s, double sqrt_abs_kappa):
    cdef Py_ssize_t B = s.shape[0], n = s.shape[1], i, j
    cdef Py_ssize_t bad = -1
    cdef floating sk = <floating> sqrt_abs_kappa
    cdef floating den, c
    out_arr = np.empty((B, n), dtype=_dtype_of(<floating> 0))
    cdef floating[:, ::1] out = out_arr
    for i in range(B):
        den = 1 + sk * xi[i]
        if fabs(den) < _GUARD and bad < 0:
            bad = i
        c = 1 / den
        for j in range(n):
            out[i, j] = c * s[i, j]
    return out_arr, bad


def inv_stereo_space_scaled(floating[:, ::1] x, double kappa, double gamma):
    cdef Py_ssize_t B = x.shape[0], n = x.shape[1], i, j
    cdef Py_ssize_t bad = -1
    cdef floating kg2 = <floating> (kappa * gamma * gamma)
    cdef floating g2 = <floating> (2.0 * gamma)
    cdef floating acc, den, c
    s_arr = np.empty((B, n), dtype=_dtype_of(<floating> 0))
    cdef floating[:, ::1] s = s_arr
    for i in range(B):
        acc = _row_sq_sum(x, i)
        den = 1 + kg2 * acc
        if fabs(den) < _GUARD and bad < 0:
            bad = i
        c = g2 / den
        for j in range(n):
            s[i, j] = c * x[i, j]
    return s_arr, bad


def vjp_scale_pair(floating[:, ::1] u, floating[:, ::1] v,
                   floating[::1] cu, floating[::1] cv):
    """Fused backward step out = cu*u - (<u, v>*cv)*v, all row-wise."""
    cdef Py_ssize_t B = u.shape[0], n = u.shape[1], i, j
    cdef floating a, b
    out_arr = np.empty((B, n), dtype=_dtype_of(<floating> 0))
    cdef floating[:, ::1] out = out_arr
    for i in range(B):
        a = cu[i]
        b = _row_dot(u, v, i) * cv[i]
        for j in range(n):
            out[i, j] = a * u[i, j] - b * v[i, j]
    return out_arr


def lift_stereo(floating[:, ::1] d, double sgn_neg, double phi,
                double sqrt_abs_kappa, double inv_gamma):
    cdef Py_ssize_t B = d.shape[0], n = d.shape[1], i, j
    cdef Py_ssize_t bad = -1
    cdef floating sg = <floating> sgn_neg
    cdef floating ph = <floating> phi
    cdef floating sk = <floating> sqrt_abs_kappa
    cdef floating ig = <floating> inv_gamma
    cdef floating acc, rad, den, c
    out_arr = np.empty((B, d.shape[1]), dtype=_dtype_of(<floating> 0))
    cdef floating[:, ::1] out = out_arr
    for i in range(B):
        acc = _row_sq_sum(d, i)
        rad = sg * acc + ph
        if rad < 0 and bad < 0:
            bad = i
        den = 1 + sk * (<floating> sqrt(rad))
        if fabs(den) < _GUARD and bad < 0:
            bad = i
        c = ig / den
        for j in range(n):
            out[i, j] = c * d[i, j]
    return out_arr, bad
