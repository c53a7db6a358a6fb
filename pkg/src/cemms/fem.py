"""Bilinear (Q1) assembly, sparse SPD solves and norm evaluation.

All forms are assembled exactly for bilinear trial/test functions with
cellwise-constant coefficients (2x2 Gauss per cell, 2-point Gauss per edge),
which reduces to fixed reference blocks scaled per cell/edge.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from cemms import _kernels as kernels
from cemms.mesh import DIRICHLET, NEUMANN

# Reference blocks in local node order (SW, SE, NW, NE).  The Q1 Laplace
# block on a square is size-invariant; the mass block scales with the cell
# area, the edge block with the edge length.
K_REF = np.array([
    [4.0, -1.0, -1.0, -2.0],
    [-1.0, 4.0, -2.0, -1.0],
    [-1.0, -2.0, 4.0, -1.0],
    [-2.0, -1.0, -1.0, 4.0],
]) / 6.0

M_REF = np.array([
    [4.0, 2.0, 2.0, 1.0],
    [2.0, 4.0, 1.0, 2.0],
    [2.0, 1.0, 4.0, 2.0],
    [1.0, 2.0, 2.0, 4.0],
]) / 36.0

E_REF = np.array([
    [2.0, 1.0],
    [1.0, 2.0],
]) / 6.0


class SolverFailure(RuntimeError):
    """PCG did not reach the requested tolerance within the iteration cap."""

    def __init__(self, message, residuals):
        super().__init__(message)
        self.residuals = np.asarray(residuals)


@dataclass(frozen=True, eq=False)
class SparseSystem:
    """Symmetric sparse form at global fine-DOF shape plus its support."""

    matrix: sp.csr_matrix
    dof_map: np.ndarray


def _coo_from_blocks(conn, coef, base, n):
    """CSR from per-cell blocks coef[c] * base scattered via conn."""
    k = conn.shape[1]
    rows = np.repeat(conn, k, axis=1).ravel()
    cols = np.tile(conn, (1, k)).ravel()
    vals = (coef[:, None, None] * base).ravel()
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(n, n))
    return mat.tocsr()


def stiffness_matrix(geom, kappa_cells, cells=None):
    """Global-shape stiffness sum_c kappa_c * K_REF over the given cells."""
    conn = geom.cells if cells is None else geom.cells[cells]
    coef = kappa_cells if cells is None else kappa_cells[cells]
    return _coo_from_blocks(conn, np.asarray(coef, dtype=float), K_REF, geom.n_nodes)


def mass_matrix(geom, weight_cells, cells=None):
    """Global-shape weighted mass sum_c w_c h^2 * M_REF over the given cells."""
    conn = geom.cells if cells is None else geom.cells[cells]
    coef = weight_cells if cells is None else weight_cells[cells]
    coef = np.asarray(coef, dtype=float) * geom.h ** 2
    return _coo_from_blocks(conn, coef, M_REF, geom.n_nodes)


def robin_matrix(geom, b_edges, edges=None):
    """Global-shape boundary mass sum_e b_e h * E_REF over boundary edges."""
    conn = geom.edge_nodes if edges is None else geom.edge_nodes[edges]
    coef = b_edges if edges is None else b_edges[edges]
    coef = np.asarray(coef, dtype=float) * geom.h
    return _coo_from_blocks(conn, coef, E_REF, geom.n_nodes)


def operator_matrix(geom, field, robin_b=None):
    """The a-form matrix: stiffness, plus the Robin boundary mass if given."""
    A = stiffness_matrix(geom, field.values)
    if robin_b is not None:
        A = (A + robin_matrix(geom, robin_b)).tocsr()
    return A


def assemble_form(geom, region, field, form, b=None, ktilde=None):
    """Assemble one of the named bilinear forms over a coarse-element region.

    form: 'stiffness-a' (needs field), 'weighted-mass-s' (needs ktilde),
    'robin-boundary' (needs b, and the region must touch the boundary).
    Returns a SparseSystem at global shape whose dof_map lists the touched
    nodes; region=None means the whole domain.
    """
    cells = None if region is None else geom.cells_of_elements(region)
    if cells is not None and cells.size == 0:
        raise ValueError("empty region")
    if form == "stiffness-a":
        mat = stiffness_matrix(geom, field.values, cells)
        conn = geom.cells if cells is None else geom.cells[cells]
    elif form == "weighted-mass-s":
        if ktilde is None:
            raise ValueError("weighted-mass-s needs ktilde")
        mat = mass_matrix(geom, ktilde, cells)
        conn = geom.cells if cells is None else geom.cells[cells]
    elif form == "robin-boundary":
        if b is None:
            raise ValueError("robin-boundary needs edge values b")
        edges = _region_boundary_edges(geom, region, scope="boundary")
        if edges.size == 0:
            raise ValueError("region does not touch the domain boundary")
        mat = robin_matrix(geom, b, edges)
        conn = geom.edge_nodes[edges]
    else:
        raise ValueError(f"unknown form {form!r}")
    return SparseSystem(matrix=mat, dof_map=np.unique(conn))


def _region_boundary_edges(geom, region, scope):
    """Boundary edges whose adjacent fine cell lies in the region.

    scope 'gamma_n' keeps Neumann-labeled edges, 'boundary' keeps all.
    """
    mask = np.ones(len(geom.edge_side), dtype=bool)
    if scope == "gamma_n":
        mask &= geom.edge_label == NEUMANN
    if region is not None:
        cells = geom.cells_of_elements(region)
        mask &= np.isin(geom.edge_cell, cells)
    return np.flatnonzero(mask)


def assemble_load(geom, region, kind, data, field=None, ktilde=None,
                  edge_scope="gamma_n"):
    """Assemble a load functional, returning a global-size nodal vector.

    kind: 'source-f' (data cellwise), 'neumann-q' (data per boundary edge,
    integrated over the region's Gamma_N edges, or all boundary edges with
    edge_scope='boundary'), 'dirichlet-lift' (data nodal g-tilde, returns
    v -> integral of A grad(g) . grad(v); needs field), 'aux-projection'
    (data nodal, returns the s-weighted moment vector; needs ktilde).
    """
    out = np.zeros(geom.n_nodes)
    cells = None if region is None else geom.cells_of_elements(region)
    if kind == "source-f":
        conn = geom.cells if cells is None else geom.cells[cells]
        f = data if cells is None else data[cells]
        contrib = np.repeat(np.asarray(f, dtype=float)[:, None] * (geom.h ** 2 / 4.0), 4, axis=1)
        np.add.at(out, conn.ravel(), contrib.ravel())
    elif kind == "neumann-q":
        edges = _region_boundary_edges(geom, region, scope=edge_scope)
        conn = geom.edge_nodes[edges]
        q = np.asarray(data, dtype=float)[edges]
        contrib = np.repeat(q[:, None] * (geom.h / 2.0), 2, axis=1)
        np.add.at(out, conn.ravel(), contrib.ravel())
    elif kind == "dirichlet-lift":
        if field is None:
            raise ValueError("dirichlet-lift needs field")
        out = stiffness_matrix(geom, field.values, cells).dot(np.asarray(data, dtype=float))
    elif kind == "aux-projection":
        if ktilde is None:
            raise ValueError("aux-projection needs ktilde")
        out = mass_matrix(geom, ktilde, cells).dot(np.asarray(data, dtype=float))
    else:
        raise ValueError(f"unknown load kind {kind!r}")
    return out


def _csr_arrays(A):
    A = A.tocsr()
    A.sum_duplicates()
    return (np.ascontiguousarray(A.indptr, dtype=np.int32),
            np.ascontiguousarray(A.indices, dtype=np.int32),
            np.ascontiguousarray(A.data, dtype=np.float64))


_EMPTY_I = np.zeros(1, dtype=np.int32)
_EMPTY_F = np.zeros(0, dtype=np.float64)


class PcgOperator:
    """A + G^T G prepared for repeated Jacobi-PCG solves.

    CSR arrays and the preconditioner are extracted once; `solve` can then
    be called with many right-hand sides (thread-safe, no shared state is
    mutated).
    """

    def __init__(self, A, G=None):
        self.A = A.tocsr()
        self.n = self.A.shape[0]
        self._a = _csr_arrays(self.A)
        diag = self.A.diagonal().copy()
        if G is not None and G.shape[0] > 0:
            self.G = G.tocsr()
            self.GT = self.G.T.tocsr()
            self._g = _csr_arrays(self.G)
            self._gt = _csr_arrays(self.GT)
            self.n_g = self.G.shape[0]
            diag += np.asarray(self.G.multiply(self.G).sum(axis=0)).ravel()
        else:
            self.G = None
            self._g = (_EMPTY_I, _EMPTY_I[:0], _EMPTY_F)
            self._gt = (_EMPTY_I, _EMPTY_I[:0], _EMPTY_F)
            self.n_g = 0
        if np.any(diag <= 0.0):
            raise SolverFailure("system has a nonpositive diagonal entry", np.array([]))
        self.inv_diag = 1.0 / diag

    def matvec(self, v):
        out = self.A.dot(v)
        if self.n_g:
            out += self.GT.dot(self.G.dot(v))
        return out

    def solve(self, b, tol=1e-10, maxiter=None, x0=None):
        """Solve to the relative true-residual tolerance; raises SolverFailure."""
        b = np.asarray(b, dtype=np.float64)
        if maxiter is None:
            maxiter = int(np.ceil(50.0 * np.sqrt(self.n)))
        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            return np.zeros(self.n)
        x = np.zeros(self.n) if x0 is None else np.asarray(x0, dtype=np.float64)
        history = []
        remaining = maxiter
        true_rel = np.inf
        for _ in range(4):
            x, it, rel, hist = kernels.pcg(
                *self._a, *self._g, *self._gt, self.n_g,
                b, self.inv_diag, x, float(tol), int(max(remaining, 1)))
            history.append(hist)
            remaining -= max(it, 1)
            true_rel = np.linalg.norm(b - self.matvec(x)) / bnorm
            if true_rel <= tol:
                return x
            if remaining <= 0:
                break
        raise SolverFailure(
            f"PCG did not converge: relative residual {true_rel:.3e} "
            f"after {maxiter} iterations",
            np.concatenate(history))


def pcg_solve(A, b, G=None, tol=1e-10, maxiter=None, x0=None):
    """One-shot wrapper around PcgOperator for single solves."""
    return PcgOperator(A, G).solve(b, tol=tol, maxiter=maxiter, x0=x0)


def solve_spd(system, rhs, tol=1e-10, maxiter=None):
    """SPD solve entry point; accepts a SparseSystem or a sparse matrix."""
    A = system.matrix if isinstance(system, SparseSystem) else system
    return pcg_solve(A, rhs, tol=tol, maxiter=maxiter)


def restrict(A, idx):
    """A[idx][:, idx] as CSR via a selection operator (fast and deterministic)."""
    n = A.shape[0]
    R = sp.csr_matrix((np.ones(len(idx)), (np.arange(len(idx)), idx)), shape=(len(idx), n))
    return (R @ A @ R.T).tocsr()


def fine_reference_solve(geom, field, data, problem="mixed", tol=1e-10, maxiter=None):
    """Single-scale Q1 Galerkin reference solution on the fine mesh.

    'mixed' imposes the Dirichlet values strongly (symmetric elimination of
    the constrained rows), which keeps this path independent of the
    lift-based multiscale pipeline.  'robin' adds the boundary mass form and
    solves on all nodes.  The iteration cap is raised above the solver
    default: unlike the penalized local systems, the raw fine operator at
    contrast 1e6 genuinely needs the headroom under Jacobi preconditioning.
    """
    if maxiter is None:
        maxiter = int(np.ceil(400.0 * np.sqrt(geom.n_nodes)))
    f_load = assemble_load(geom, None, "source-f", data.f)
    if problem == "mixed":
        A = stiffness_matrix(geom, field.values)
        rhs = f_load + assemble_load(geom, None, "neumann-q", data.q, edge_scope="gamma_n")
        fixed = np.flatnonzero(geom.node_class == DIRICHLET)
        free = np.flatnonzero(geom.node_class != DIRICHLET)
        u = np.zeros(geom.n_nodes)
        u[fixed] = data.g_tilde[fixed]
        rhs_free = rhs[free] - A[free][:, fixed].dot(u[fixed])
        u[free] = _scaled_pcg(restrict(A, free), rhs_free, tol, maxiter)
        return u
    if problem == "robin":
        if data.b is None:
            raise ValueError("robin problem needs data.b")
        A = operator_matrix(geom, field, robin_b=data.b)
        rhs = f_load + assemble_load(geom, None, "neumann-q", data.q, edge_scope="boundary")
        return _scaled_pcg(A, rhs, tol, maxiter)
    raise ValueError(f"unknown problem kind {problem!r}")


def _scaled_pcg(A, b, tol, maxiter):
    """PCG on the symmetrically Jacobi-scaled system.

    The Krylov process is the same as Jacobi PCG on the raw system, but the
    attainable floating-point residual of the scaled operator does not
    degrade with the coefficient contrast, so the reference solve converges
    to tol even at contrast 1e6 (where the raw true residual plateaus near
    1e-9).  The residual criterion is therefore measured in the scaled norm.
    """
    s = 1.0 / np.sqrt(A.diagonal())
    S = sp.diags(s)
    y = pcg_solve((S @ A @ S).tocsr(), s * b, tol=tol, maxiter=maxiter)
    return s * y


def norm(geom, field, v, which, region=None, ktilde=None, robin_b=None):
    """Evaluate ||v|| in the requested (semi)norm, optionally per region.

    which: 'energy-a' (adds the Robin boundary term when robin_b is given),
    'weighted-s' (needs ktilde) or 'L2'.  region is a coarse-element id set;
    restriction is exact because all forms are sums over fine cells/edges.
    """
    v = np.ascontiguousarray(v, dtype=np.float64)
    cells = None if region is None else geom.cells_of_elements(region)
    conn = geom.cells if cells is None else geom.cells[cells]
    if which == "energy-a":
        coef = field.values if cells is None else field.values[cells]
        val = kernels.cell_quadratic(np.ascontiguousarray(conn),
                                     np.ascontiguousarray(coef, dtype=np.float64),
                                     K_REF, v)
        if robin_b is not None:
            edges = _region_boundary_edges(geom, region, scope="boundary")
            if edges.size:
                ve = v[geom.edge_nodes[edges]]
                be = np.asarray(robin_b, dtype=float)[edges] * geom.h
                val += float(np.einsum("ea,ab,eb,e->", ve, E_REF, ve, be))
    elif which == "weighted-s":
        if ktilde is None:
            raise ValueError("weighted-s needs ktilde")
        coef = (ktilde if cells is None else ktilde[cells]) * geom.h ** 2
        val = kernels.cell_quadratic(np.ascontiguousarray(conn),
                                     np.ascontiguousarray(coef, dtype=np.float64),
                                     M_REF, v)
    elif which == "L2":
        coef = np.full(conn.shape[0], geom.h ** 2)
        val = kernels.cell_quadratic(np.ascontiguousarray(conn), coef, M_REF, v)
    else:
        raise ValueError(f"unknown norm {which!r}")
    return float(np.sqrt(max(val, 0.0)))


def f_dual_norm_surrogate(geom, f, ktilde):
    """Computable stand-in for the dual norm of f against the weighted mass.

    Exact within the cellwise-constant subspace: sqrt(sum f^2 |cell| / ktilde).
    """
    return float(np.sqrt(np.sum(np.asarray(f) ** 2 * geom.h ** 2 / np.asarray(ktilde))))
