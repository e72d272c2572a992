# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled stencil kernels for the periodic torus grid.

Single-pass fused loops; the numpy fallback in _stencil_np.py matches these
bit-for-bit (same operation order per node).
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def lap5_periodic(cnp.ndarray[cnp.float64_t, ndim=2] f, double inv_h2, out=None):
    cdef Py_ssize_t n0 = f.shape[0]
    cdef Py_ssize_t n1 = f.shape[1]
    if out is None:
        out = np.empty_like(f)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] o = out
    cdef Py_ssize_t i, j, im, ip, jm, jp
    for i in range(n0):
        im = i - 1 if i > 0 else n0 - 1
        ip = i + 1 if i < n0 - 1 else 0
        for j in range(n1):
            jm = j - 1 if j > 0 else n1 - 1
            jp = j + 1 if j < n1 - 1 else 0
            o[i, j] = (f[im, j] + f[ip, j] + f[i, jm] + f[i, jp] - 4.0 * f[i, j]) * inv_h2
    return out


def newton_apply(cnp.ndarray[cnp.float64_t, ndim=2] v,
                 cnp.ndarray[cnp.float64_t, ndim=2] dens,
                 cnp.ndarray[cnp.float64_t, ndim=2] fprime,
                 double dt, double inv_h2, out=None):
    cdef Py_ssize_t n0 = v.shape[0]
    cdef Py_ssize_t n1 = v.shape[1]
    if out is None:
        out = np.empty_like(v)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] o = out
    cdef Py_ssize_t i, j, im, ip, jm, jp
    cdef double lap
    for i in range(n0):
        im = i - 1 if i > 0 else n0 - 1
        ip = i + 1 if i < n0 - 1 else 0
        for j in range(n1):
            jm = j - 1 if j > 0 else n1 - 1
            jp = j + 1 if j < n1 - 1 else 0
            lap = (v[im, j] + v[ip, j] + v[i, jm] + v[i, jp] - 4.0 * v[i, j]) * inv_h2
            o[i, j] = v[i, j] - dt * (lap / dens[i, j]) - dt * (fprime[i, j] * v[i, j])
    return out
