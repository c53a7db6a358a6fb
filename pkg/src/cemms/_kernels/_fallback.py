"""Pure numpy/scipy implementations of the hot kernels.

Mirrors the compiled extension in `_core.pyx`; selected automatically when
the extension is absent or when CEMMS_PURE_PYTHON is set.
"""

import numpy as np
import scipy.sparse as sp

NAME = "numpy"


def _wrap_csr(n_rows, n_cols, indptr, indices, data):
    return sp.csr_matrix((data, indices, indptr), shape=(n_rows, n_cols))


def pcg(a_indptr, a_indices, a_data,
        g_indptr, g_indices, g_data,
        gt_indptr, gt_indices, gt_data,
        n_g_rows, b, inv_diag, x0, rtol, maxiter):
    """Jacobi-preconditioned CG on A + G^T G (G optional, may be empty).

    Returns (x, n_iter, rel_residual, history); history[k] is the recurrence
    residual norm relative to ||b|| after k iterations.  Iteration order and
    arithmetic are fixed, so results are reproducible run to run.
    """
    n = b.shape[0]
    A = _wrap_csr(n, n, a_indptr, a_indices, a_data)
    has_g = n_g_rows > 0
    if has_g:
        G = _wrap_csr(n_g_rows, n, g_indptr, g_indices, g_data)
        GT = _wrap_csr(n, n_g_rows, gt_indptr, gt_indices, gt_data)

    def matvec(v):
        out = A.dot(v)
        if has_g:
            out += GT.dot(G.dot(v))
        return out

    bnorm = np.linalg.norm(b)
    hist = np.empty(maxiter + 1)
    if bnorm == 0.0:
        hist[0] = 0.0
        return np.zeros(n), 0, 0.0, hist[:1]

    x = x0.copy()
    r = b - matvec(x)
    z = inv_diag * r
    p = z.copy()
    rho = float(r @ z)
    rel = float(np.linalg.norm(r) / bnorm)
    hist[0] = rel
    it = 0
    while it < maxiter:
        q = matvec(p)
        denom = float(p @ q)
        if denom <= 0.0:
            break
        alpha = rho / denom
        x += alpha * p
        r -= alpha * q
        it += 1
        rel = float(np.linalg.norm(r) / bnorm)
        hist[it] = rel
        if rel <= rtol:
            break
        z = inv_diag * r
        rho_next = float(r @ z)
        p = z + (rho_next / rho) * p
        rho = rho_next
    return x, it, rel, hist[:it + 1]


def cell_quadratic(conn, coef, base, v):
    """sum_c coef[c] * v[conn[c]]^T base v[conn[c]] for 4-node cells."""
    vloc = v[conn]
    return float(np.einsum("ca,ab,cb,c->", vloc, base, vloc, coef))
