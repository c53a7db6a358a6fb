"""Localized energy-minimizing multiscale basis functions.

Each basis function solves, on the free DOFs of an oversampled region, the
penalized SPD problem

    a(psi, v) + s(pi psi, pi v) = s(phi_i^j, pi v)   for all region test v,

with the projection restricted to the coarse elements inside the region.
The right-hand side is the s-weighted moment row of the owning eigenvector.
Taking the region to be the whole domain gives the global oracle basis.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from cemms import fem
from cemms.aux_space import project_pi
from cemms.mesh import global_region, oversample_region


@dataclass(frozen=True, eq=False)
class BasisFunction:
    """One multiscale basis vector, stored on its support."""

    element: int
    eigindex: int
    layers: int            # n_coarse - 1 or more means the global problem
    support: np.ndarray    # free node ids of the region
    values: np.ndarray

    def full(self, n_nodes):
        out = np.zeros(n_nodes)
        out[self.support] = self.values
        return out


class RegionOperator:
    """Penalized operator of one region, reusable across right-hand sides."""

    def __init__(self, geom, aux, A, region):
        self.region = region
        self.free = region.fine_dof_set
        n = geom.n_nodes
        k = aux.n_kept
        R = sp.csr_matrix((np.ones(len(self.free)), (np.arange(len(self.free)), self.free)),
                          shape=(len(self.free), n))
        row_ids = (np.asarray(region.element_set)[:, None] * k + np.arange(k)).ravel()
        G = aux.moment_rows[row_ids] @ R.T
        self.op = fem.PcgOperator((R @ A @ R.T).tocsr(), G)

    def solve(self, rhs_full, tol=1e-10):
        return self.op.solve(rhs_full[self.free], tol=tol)


def solve_penalized(geom, aux, A, region, rhs_full, tol=1e-10):
    """Single penalized region solve; returns (support, values)."""
    op = RegionOperator(geom, aux, A, region)
    return op.free, op.solve(rhs_full, tol=tol)


def _moment_row(aux, i, j):
    return aux.moment_rows[aux.row_index(i, j)].toarray().ravel()


def build_ms_basis(geom, field, aux, i, j, m, A=None, robin_b=None, tol=1e-10):
    """Localized basis for eigenpair (i, j) on the m-layer region."""
    if not (0 <= j <= aux.l_m):
        raise ValueError(f"eigindex {j} outside truncation {aux.l_m}")
    if A is None:
        A = fem.operator_matrix(geom, field, robin_b=robin_b)
    region = oversample_region(geom, i, m)
    support, values = solve_penalized(geom, aux, A, region, _moment_row(aux, i, j), tol=tol)
    return BasisFunction(element=i, eigindex=j, layers=m, support=support, values=values)


def build_global_basis(geom, field, aux, i, j, A=None, robin_b=None, tol=1e-10):
    """Global oracle basis for eigenpair (i, j), solved on the whole domain."""
    if A is None:
        A = fem.operator_matrix(geom, field, robin_b=robin_b)
    region = global_region(geom)
    support, values = solve_penalized(geom, aux, A, region, _moment_row(aux, i, j), tol=tol)
    return BasisFunction(element=i, eigindex=j, layers=geom.n_coarse - 1,
                         support=support, values=values)


def build_basis_matrix(geom, field, aux, m, A=None, robin_b=None, tol=1e-10,
                       workers=None):
    """All localized basis vectors as a sparse (n_nodes, N*(l_m+1)) matrix.

    Column (i, j) sits at index i*(l_m+1)+j.  m >= n_coarse-1 yields the
    global basis matrix.  Element solves are independent; with workers > 1
    they run on a thread pool and are reassembled in element order.
    """
    if A is None:
        A = fem.operator_matrix(geom, field, robin_b=robin_b)
    k = aux.n_kept
    N = geom.n_elements
    m_eff = min(m, geom.n_coarse - 1)

    def do_element(i):
        region = oversample_region(geom, i, m_eff)
        op = RegionOperator(geom, aux, A, region)
        cols = []
        for j in range(k):
            cols.append(op.solve(_moment_row(aux, i, j), tol=tol))
        return op.free, cols

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(do_element, range(N)))
    else:
        results = [do_element(i) for i in range(N)]

    rows, cols, data = [], [], []
    for i, (free, vecs) in enumerate(results):
        for j, v in enumerate(vecs):
            rows.append(free)
            cols.append(np.full(free.size, i * k + j))
            data.append(v)
    return sp.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(geom.n_nodes, N * k)).tocsc()


def variational_residual(geom, aux, A, basis, rhs_full=None):
    """Max residual of the defining equation over the region's test DOFs."""
    if rhs_full is None:
        rhs_full = _moment_row(aux, basis.element, basis.eigindex)
    region = oversample_region(geom, basis.element, min(basis.layers, geom.n_coarse - 1))
    op = RegionOperator(geom, aux, A, region)
    res = rhs_full[op.free] - op.op.matvec(basis.values)
    scale = max(np.linalg.norm(rhs_full[op.free]), 1e-300)
    return float(np.linalg.norm(res) / scale)


def dump_basis(path, geom, basis):
    """Write a basis function as a real-valued grid file for visualization."""
    from cemms.media import dump_nodal
    dump_nodal(path, geom, basis.full(geom.n_nodes))


def decay_profile(geom, field, aux, ktilde, basis, robin_b=None):
    """Relative energy mass of a basis function outside growing regions.

    Entry m' is (||psi||_a^2 + ||pi psi||_s^2 outside the m'-layer block
    around the owner) / (the same over the domain), for m' = 0 .. n_coarse-1.
    Nonincreasing by construction; the last entry is exactly zero.
    """
    nc = geom.n_coarse
    i = basis.element
    ex, ey = geom.coarse_coords(i)
    ids = np.arange(geom.n_elements)
    dist = np.maximum(np.abs(ids % nc - ex), np.abs(ids // nc - ey))

    psi = basis.full(geom.n_nodes)
    pi_psi = project_pi(aux, psi)
    den = fem.norm(geom, field, psi, "energy-a", robin_b=robin_b) ** 2 \
        + pi_psi.s_norm2()
    if den == 0.0:
        raise ValueError("basis function has zero energy")

    out = np.empty(nc)
    for mp in range(nc):
        ext = ids[dist > mp]
        if ext.size == 0:
            out[mp] = 0.0
            continue
        num = fem.norm(geom, field, psi, "energy-a", region=ext, robin_b=robin_b) ** 2 \
            + pi_psi.s_norm2(ext)
        out[mp] = num / den
    return out
