# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the structured regressor and power-flow Jacobian."""
import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef extern from "complex.h" nogil:
    double complex conj(double complex)
    double cabs(double complex)


def regressor(const double complex[::1] v, const long[::1] rows, const long[::1] cols,
              const long[::1] params, const double[::1] coefs, Py_ssize_t n, Py_ssize_t dim):
    out = np.zeros((n, dim), dtype=np.complex128)
    cdef double complex[:, ::1] a = out
    cdef Py_ssize_t k, m = rows.shape[0]
    with nogil:
        for k in range(m):
            a[rows[k], params[k]] += coefs[k] * v[cols[k]]
    return out


def regressor_adjoint(const double complex[:, ::1] w, const long[::1] rows, const long[::1] cols,
                      const long[::1] params, const double[::1] coefs, Py_ssize_t n):
    out = np.zeros(n, dtype=np.complex128)
    cdef double complex[::1] g = out
    cdef Py_ssize_t k, m = rows.shape[0]
    with nogil:
        for k in range(m):
            g[cols[k]] += coefs[k] * w[rows[k], params[k]]
    return out


def injection_jacobian(const double complex[:, ::1] y, const double complex[::1] v):
    cdef Py_ssize_t n = v.shape[0], i, k
    s_arr = np.empty(n, dtype=np.complex128)
    dva_arr = np.empty((n, n), dtype=np.complex128)
    dvm_arr = np.empty((n, n), dtype=np.complex128)
    cdef double complex[::1] s = s_arr
    cdef double complex[:, ::1] dva = dva_arr
    cdef double complex[:, ::1] dvm = dvm_arr
    cdef double complex ci, yv, vi
    cdef double complex[::1] vn = np.empty(n, dtype=np.complex128)
    with nogil:
        for k in range(n):
            vn[k] = v[k] / cabs(v[k])
        for i in range(n):
            ci = 0
            vi = v[i]
            for k in range(n):
                yv = y[i, k] * v[k]
                ci = ci + yv
                dva[i, k] = -1j * vi * conj(yv)
                dvm[i, k] = vi * conj(y[i, k] * vn[k])
            s[i] = vi * conj(ci)
            dva[i, i] = dva[i, i] + 1j * vi * conj(ci)
            dvm[i, i] = dvm[i, i] + conj(ci) * vn[i]
    return s_arr, dva_arr, dvm_arr
