# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: fused preconditioned CG and cellwise quadratic forms.

Same call signatures as `_fallback`; the CG loop runs without the GIL so
independent solves can proceed on worker threads.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

NAME = "compiled"

ctypedef cnp.float64_t f64
ctypedef cnp.int32_t i32


cdef void _csr_matvec(const i32[::1] indptr, const i32[::1] indices,
                      const f64[::1] data, const f64[::1] v,
                      f64[::1] out, Py_ssize_t n_rows) noexcept nogil:
    cdef Py_ssize_t i, k
    cdef f64 acc
    for i in range(n_rows):
        acc = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            acc += data[k] * v[indices[k]]
        out[i] = acc


cdef void _csr_matvec_add(const i32[::1] indptr, const i32[::1] indices,
                          const f64[::1] data, const f64[::1] v,
                          f64[::1] out, Py_ssize_t n_rows) noexcept nogil:
    cdef Py_ssize_t i, k
    cdef f64 acc
    for i in range(n_rows):
        acc = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            acc += data[k] * v[indices[k]]
        out[i] += acc


cdef f64 _dot(const f64[::1] a, const f64[::1] b, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    cdef f64 acc = 0.0
    for i in range(n):
        acc += a[i] * b[i]
    return acc


def pcg(i32[::1] a_indptr, i32[::1] a_indices, f64[::1] a_data,
        i32[::1] g_indptr, i32[::1] g_indices, f64[::1] g_data,
        i32[::1] gt_indptr, i32[::1] gt_indices, f64[::1] gt_data,
        Py_ssize_t n_g_rows,
        f64[::1] b, f64[::1] inv_diag, f64[::1] x0,
        double rtol, Py_ssize_t maxiter):
    """Jacobi-preconditioned CG on A + G^T G; see the fallback docstring."""
    cdef Py_ssize_t n = b.shape[0]
    cdef cnp.ndarray[f64, ndim=1] x_arr = np.array(x0, dtype=np.float64, copy=True)
    cdef cnp.ndarray[f64, ndim=1] hist_arr = np.empty(maxiter + 1, dtype=np.float64)
    cdef f64[::1] x = x_arr
    cdef f64[::1] hist = hist_arr
    cdef cnp.ndarray[f64, ndim=1] r_arr = np.empty(n, dtype=np.float64)
    cdef cnp.ndarray[f64, ndim=1] z_arr = np.empty(n, dtype=np.float64)
    cdef cnp.ndarray[f64, ndim=1] p_arr = np.empty(n, dtype=np.float64)
    cdef cnp.ndarray[f64, ndim=1] q_arr = np.empty(n, dtype=np.float64)
    cdef cnp.ndarray[f64, ndim=1] t_arr = np.empty(max(n_g_rows, 1), dtype=np.float64)
    cdef f64[::1] r = r_arr
    cdef f64[::1] z = z_arr
    cdef f64[::1] p = p_arr
    cdef f64[::1] q = q_arr
    cdef f64[::1] t = t_arr

    cdef bint has_g = n_g_rows > 0
    cdef f64 bnorm, rho, rho_next, alpha, beta, denom, rel
    cdef Py_ssize_t i, it

    with nogil:
        bnorm = sqrt(_dot(b, b, n))
    if bnorm == 0.0:
        hist[0] = 0.0
        return np.zeros(n), 0, 0.0, hist_arr[:1]

    it = 0
    with nogil:
        # r = b - (A x + G^T G x)
        _csr_matvec(a_indptr, a_indices, a_data, x, r, n)
        if has_g:
            _csr_matvec(g_indptr, g_indices, g_data, x, t, n_g_rows)
            _csr_matvec_add(gt_indptr, gt_indices, gt_data, t, r, n)
        for i in range(n):
            r[i] = b[i] - r[i]
            z[i] = inv_diag[i] * r[i]
            p[i] = z[i]
        rho = _dot(r, z, n)
        rel = sqrt(_dot(r, r, n)) / bnorm
        hist[0] = rel
        while it < maxiter:
            _csr_matvec(a_indptr, a_indices, a_data, p, q, n)
            if has_g:
                _csr_matvec(g_indptr, g_indices, g_data, p, t, n_g_rows)
                _csr_matvec_add(gt_indptr, gt_indices, gt_data, t, q, n)
            denom = _dot(p, q, n)
            if denom <= 0.0:
                break
            alpha = rho / denom
            for i in range(n):
                x[i] += alpha * p[i]
                r[i] -= alpha * q[i]
            it += 1
            rel = sqrt(_dot(r, r, n)) / bnorm
            hist[it] = rel
            if rel <= rtol:
                break
            rho_next = 0.0
            for i in range(n):
                z[i] = inv_diag[i] * r[i]
                rho_next += r[i] * z[i]
            beta = rho_next / rho
            for i in range(n):
                p[i] = z[i] + beta * p[i]
            rho = rho_next

    return x_arr, it, rel, hist_arr[:it + 1]


def cell_quadratic(cnp.int64_t[:, ::1] conn, f64[::1] coef,
                   f64[:, ::1] base, f64[::1] v):
    """sum_c coef[c] * v[conn[c]]^T base v[conn[c]] for 4-node cells."""
    cdef Py_ssize_t n_cells = conn.shape[0]
    cdef Py_ssize_t c, a, bb
    cdef f64 total = 0.0, cell, va
    cdef f64 vloc[4]
    with nogil:
        for c in range(n_cells):
            for a in range(4):
                vloc[a] = v[conn[c, a]]
            cell = 0.0
            for a in range(4):
                va = vloc[a]
                for bb in range(4):
                    cell += va * base[a, bb] * vloc[bb]
            total += coef[c] * cell
    return total
