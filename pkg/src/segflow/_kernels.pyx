# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for diagonal Gaussian-mixture fields.

Mirrors :mod:`segflow._kernels_py` exactly; see there for the math.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()

cdef double LOG_2PI = 1.8378770664093453


def gmm_velocity_batch(const double[:, ::1] x, double t, const double[:, ::1] shift,
                       const double[::1] log_weights, const double[:, ::1] means,
                       const double[:, ::1] variances):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], J = means.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double s = 1.0 - t, m, a, var, r, ll, lmax, total, wj
    out_arr = np.zeros((n, d), dtype=np.float64)
    logl_arr = np.empty(J, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] logl = logl_arr
    with nogil:
        for i in range(n):
            lmax = -INFINITY
            for j in range(J):
                ll = log_weights[j]
                for k in range(d):
                    m = means[j, k] + shift[i, k]
                    var = s * s * variances[j, k] + t * t
                    r = x[i, k] - s * m
                    ll -= 0.5 * (LOG_2PI + log(var) + r * r / var)
                logl[j] = ll
                if ll > lmax:
                    lmax = ll
            total = 0.0
            for j in range(J):
                logl[j] = exp(logl[j] - lmax)
                total += logl[j]
            for j in range(J):
                wj = logl[j] / total
                if wj == 0.0:
                    continue
                for k in range(d):
                    m = means[j, k] + shift[i, k]
                    var = s * s * variances[j, k] + t * t
                    r = x[i, k] - s * m
                    out[i, k] += wj * ((t - s * variances[j, k]) / var * r - m)
    return out_arr


def gmm_logpdf_batch(const double[:, ::1] x, const double[:, ::1] shift,
                     const double[::1] log_weights, const double[:, ::1] means,
                     const double[:, ::1] variances):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], J = means.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double r, ll, lmax, total, var
    out_arr = np.empty(n, dtype=np.float64)
    logl_arr = np.empty(J, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double[::1] logl = logl_arr
    with nogil:
        for i in range(n):
            lmax = -INFINITY
            for j in range(J):
                ll = log_weights[j]
                for k in range(d):
                    var = variances[j, k]
                    r = x[i, k] - means[j, k] - shift[i, k]
                    ll -= 0.5 * (LOG_2PI + log(var) + r * r / var)
                logl[j] = ll
                if ll > lmax:
                    lmax = ll
            if lmax == -INFINITY:
                out[i] = -INFINITY
                continue
            total = 0.0
            for j in range(J):
                total += exp(logl[j] - lmax)
            out[i] = lmax + log(total)
    return out_arr
