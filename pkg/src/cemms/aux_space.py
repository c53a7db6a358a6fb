"""Per-element spectral auxiliary spaces and the weighted projection.

Each coarse element carries a generalized eigenproblem
A_loc phi = lambda S_loc phi over all fine DOFs of the closed element
(Neumann-type local problem), with A_loc the local stiffness (plus the
Robin boundary block for Robin problems) and S_loc the ktilde-weighted
mass.  The lowest eigenvectors span the auxiliary space; members of that
space are stored elementwise as coefficient arrays because their
zero-extensions are discontinuous across coarse edges.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from cemms import fem

CLUSTER_GAP_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class AuxBasis:
    """Eigenpairs, projection data and spectral summary for all elements."""

    l_m: int
    eigvals: np.ndarray        # (N, l_m + 2), one extra pair beyond the kept ones
    vectors: np.ndarray        # (N, n_loc, l_m + 1) kept eigenvectors, s-orthonormal
    moment_rows: sp.csr_matrix  # (N*(l_m+1), n_nodes): row (i,j) = S_i phi_i^j scattered
    spectral_gap: float        # min over elements of the first excluded eigenvalue
    top_kept: float            # max over elements of the largest kept eigenvalue
    cluster_warnings: np.ndarray  # element ids where the truncation hits a cluster
    robin: bool = False

    @property
    def n_kept(self):
        return self.l_m + 1

    @property
    def n_elements(self):
        return self.eigvals.shape[0]

    def row_index(self, i, j):
        return i * self.n_kept + j


@dataclass(frozen=True, eq=False)
class AuxField:
    """Member of the auxiliary space, stored as per-element coefficients."""

    coeffs: np.ndarray  # (N, l_m + 1)

    def s_norm2(self, element_set=None):
        if element_set is None:
            return float(np.sum(self.coeffs ** 2))
        return float(np.sum(self.coeffs[np.asarray(element_set)] ** 2))

    def s_norm(self, element_set=None):
        return float(np.sqrt(self.s_norm2(element_set)))


def _element_dense_pair(geom, field, ktilde, i, robin_b=None):
    """Dense (A_loc, S_loc) over the fine nodes of coarse element i."""
    nodes = geom.nodes_of_coarse[i]   # ascending
    n_loc = nodes.size
    cells = geom.cells_of_coarse[i]
    loc_conn = np.searchsorted(nodes, geom.cells[cells])

    A = np.zeros((n_loc, n_loc))
    S = np.zeros((n_loc, n_loc))
    kap = field.values[cells]
    wgt = ktilde[cells] * geom.h ** 2
    for a in range(4):
        for b in range(4):
            np.add.at(A, (loc_conn[:, a], loc_conn[:, b]), kap * fem.K_REF[a, b])
            np.add.at(S, (loc_conn[:, a], loc_conn[:, b]), wgt * fem.M_REF[a, b])

    if robin_b is not None:
        edges = np.flatnonzero(np.isin(geom.edge_cell, cells))
        if edges.size:
            loc_en = np.searchsorted(nodes, geom.edge_nodes[edges])
            be = np.asarray(robin_b, dtype=float)[edges] * geom.h
            for a in range(2):
                for b in range(2):
                    np.add.at(A, (loc_en[:, a], loc_en[:, b]), be * fem.E_REF[a, b])
    return A, S, nodes


def _fix_signs(vecs):
    """Largest-magnitude entry positive; first occurrence wins ties."""
    for j in range(vecs.shape[1]):
        k = int(np.argmax(np.abs(vecs[:, j])))
        if vecs[k, j] < 0.0:
            vecs[:, j] = -vecs[:, j]
    return vecs


def _solve_element(geom, field, ktilde, i, count, robin_b=None):
    A, S, nodes = _element_dense_pair(geom, field, ktilde, i, robin_b=robin_b)
    if count > A.shape[0]:
        raise ValueError(f"requested {count} pairs, element has {A.shape[0]} DOFs")
    vals, vecs = sla.eigh(A, S, subset_by_index=(0, count - 1))
    return vals, _fix_signs(vecs), nodes, S


def local_eigendecomposition(geom, field, ktilde, i, count, robin_b=None):
    """The `count` smallest eigenpairs of the local pencil on element i.

    Eigenvectors come back S-orthonormal with the deterministic sign
    convention applied.
    """
    vals, vecs, nodes, _ = _solve_element(geom, field, ktilde, i, count, robin_b=robin_b)
    return vals, vecs, nodes


def dense_eig_oracle(geom, field, ktilde, i, robin_b=None):
    """Full spectrum of the local pencil, for cross-checking (small elements)."""
    A, S, _ = _element_dense_pair(geom, field, ktilde, i, robin_b=robin_b)
    return sla.eigh(A, S, eigvals_only=True)


def build_aux_basis(geom, field, ktilde, l_m, robin_b=None, workers=None):
    """Solve every local eigenproblem and assemble the projection rows."""
    N = geom.n_elements
    count = l_m + 2

    def solve_one(i):
        return _solve_element(geom, field, ktilde, i, count, robin_b=robin_b)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(solve_one, range(N)))
    else:
        results = [solve_one(i) for i in range(N)]

    n_loc = geom.nodes_of_coarse.shape[1]
    eigvals = np.empty((N, count))
    vectors = np.empty((N, n_loc, l_m + 1))
    rows, cols, data = [], [], []
    warnings = []
    for i, (vals, vecs, nodes, S_loc) in enumerate(results):
        eigvals[i] = vals
        vectors[i] = vecs[:, : l_m + 1]
        gap = vals[l_m + 1] - vals[l_m]
        if gap < CLUSTER_GAP_TOL * max(vals[l_m + 1], 1.0):
            warnings.append(i)
        # moment rows: (S_loc phi_j)^T scattered to global columns
        moments = S_loc @ vecs[:, : l_m + 1]
        for j in range(l_m + 1):
            rows.append(np.full(n_loc, i * (l_m + 1) + j))
            cols.append(nodes)
            data.append(moments[:, j])
    moment_rows = sp.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(N * (l_m + 1), geom.n_nodes))

    spectral_gap = float(eigvals[:, l_m + 1].min())
    top_kept = float(eigvals[:, l_m].max())
    return AuxBasis(l_m=l_m, eigvals=eigvals, vectors=vectors,
                    moment_rows=moment_rows, spectral_gap=spectral_gap,
                    top_kept=top_kept,
                    cluster_warnings=np.asarray(warnings, dtype=np.int64),
                    robin=robin_b is not None)


def project_pi(aux, v, geom=None, element_set=None):
    """Weighted projection onto the auxiliary space.

    Accepts a fine nodal vector (the continuous case) or an AuxField (the
    already-projected case, where the coefficients are recomputed from the
    elementwise nodal pieces, so the round trip exercises restriction and
    orthonormality).  Returns an AuxField; restriction to an element subset
    zeroes the other elements.
    """
    if isinstance(v, AuxField):
        coeffs = np.empty_like(v.coeffs)
        if geom is None:
            raise ValueError("projecting an AuxField needs geom")
        k = coeffs.shape[1]
        for i in range(coeffs.shape[0]):
            piece = aux.vectors[i] @ v.coeffs[i]
            rows = aux.moment_rows[i * k:(i + 1) * k][:, geom.nodes_of_coarse[i]]
            coeffs[i] = rows @ piece
    else:
        flat = aux.moment_rows @ np.asarray(v, dtype=np.float64)
        coeffs = flat.reshape(aux.n_elements, aux.n_kept)
    if element_set is not None:
        mask = np.zeros(coeffs.shape[0], dtype=bool)
        mask[np.asarray(element_set)] = True
        coeffs = np.where(mask[:, None], coeffs, 0.0)
    return AuxField(coeffs=coeffs)


def broken_nodal(aux, geom, field_or_coeffs, superpose=True):
    """Nodal picture of an auxiliary-space member.

    With superpose=True returns one global nodal vector with elementwise
    pieces added at shared nodes (visualization only: coarse-interface nodes
    carry the sum of the one-sided values); otherwise returns the
    (N, n_loc) per-element nodal pieces.
    """
    coeffs = field_or_coeffs.coeffs if isinstance(field_or_coeffs, AuxField) else field_or_coeffs
    pieces = np.einsum("ilk,ik->il", aux.vectors, coeffs)
    if not superpose:
        return pieces
    out = np.zeros(geom.n_nodes)
    for i in range(coeffs.shape[0]):
        out[geom.nodes_of_coarse[i]] += pieces[i]
    return out
