"""Boundary-correction operators for inhomogeneous data.

The Dirichlet-lift correction absorbs, element by element, the gradient
energy of the lift; the flux correction absorbs the boundary flux
functional.  Each per-element piece solves the same penalized variational
problem as the basis functions, on the element's oversampled region (or the
whole domain for the oracle versions), and the aggregate is the plain sum
of zero-extended pieces in element order.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from cemms import fem
from cemms.cem_basis import RegionOperator
from cemms.mesh import NEUMANN, global_region, oversample_region


class DegenerateCorrection(ValueError):
    """Raised when an error ratio has a zero-norm denominator."""


@dataclass(frozen=True, eq=False)
class BoundaryCorrection:
    """Aggregate corrector plus its per-element pieces."""

    kind: str                # 'dirichlet' | 'neumann' | 'robin-flux'
    layers: object           # int, or 'global' for the oracle version
    aggregate: np.ndarray    # (n_nodes,)
    pieces: list             # [(element, support, values)] for solved elements
    skipped: np.ndarray      # element ids with an exactly-zero right side

    @property
    def is_oracle(self):
        return self.layers == "global"


def _lift_loads(geom, field, g_tilde):
    """Per-element right sides v -> integral over K_i of A grad(g).grad(v).

    Returns (rhs_rows, zero_mask): rhs_rows[i] is a global-size vector;
    elements where g is nodally constant are exactly zero and masked.
    """
    g = np.asarray(g_tilde, dtype=np.float64)
    conn = geom.cells
    gloc = g[conn]
    contrib = (field.values[:, None]) * (gloc @ fem.K_REF)
    N = geom.n_elements
    rhs = np.zeros((N, geom.n_nodes))
    zero = np.zeros(N, dtype=bool)
    for i in range(N):
        cells = geom.cells_of_coarse[i]
        gl = gloc[cells]
        if np.all(gl == gl[0, 0]):
            zero[i] = True
            continue
        np.add.at(rhs[i], conn[cells].ravel(), contrib[cells].ravel())
    return rhs, zero


def _flux_loads(geom, q_edges, scope):
    """Per-element right sides v -> integral over the element's scope edges."""
    q = np.asarray(q_edges, dtype=np.float64)
    N = geom.n_elements
    rhs = np.zeros((N, geom.n_nodes))
    zero = np.ones(N, dtype=bool)
    mask = np.ones(len(geom.edge_side), dtype=bool)
    if scope == "gamma_n":
        mask &= geom.edge_label == NEUMANN
    edges = np.flatnonzero(mask)
    owner = geom.cell_coarse[geom.edge_cell[edges]]
    for e, i in zip(edges, owner):
        n0, n1 = geom.edge_nodes[e]
        w = q[e] * geom.h / 2.0
        rhs[i, n0] += w
        rhs[i, n1] += w
        if w != 0.0:
            zero[i] = False
    # an element may own only zero-flux edges; treat it as skipped
    for i in range(N):
        if not zero[i] and not np.any(rhs[i]):
            zero[i] = True
    return rhs, zero


def _solve_pieces(geom, aux, A, rhs_rows, zero_mask, m, tol, workers):
    N = geom.n_elements
    solve_ids = [i for i in range(N) if not zero_mask[i]]
    glob = m == "global"
    if glob:
        shared = RegionOperator(geom, aux, A, global_region(geom))

    def do_one(i):
        op = shared if glob else RegionOperator(geom, aux, A, oversample_region(geom, i, m))
        try:
            return op.free, op.solve(rhs_rows[i], tol=tol)
        except fem.SolverFailure as exc:
            raise fem.SolverFailure(f"correction solve failed on element {i}: {exc}",
                                    exc.residuals) from exc

    if workers and workers > 1 and not glob:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(do_one, solve_ids))
    else:
        results = [do_one(i) for i in solve_ids]

    aggregate = np.zeros(geom.n_nodes)
    pieces = []
    for i, (support, values) in zip(solve_ids, results):
        pieces.append((i, support, values))
        aggregate[support] += values
    return aggregate, pieces


def dirichlet_correction(geom, field, aux, g_tilde, m, A=None, tol=1e-10, workers=None):
    """Lift correction: one penalized solve per element with lift energy.

    m is a layer count or 'global' for the oracle.  Elements where the lift
    is constant are skipped (their right side vanishes identically).
    """
    if A is None:
        A = fem.operator_matrix(geom, field)
    rhs_rows, zero_mask = _lift_loads(geom, field, g_tilde)
    aggregate, pieces = _solve_pieces(geom, aux, A, rhs_rows, zero_mask, m, tol, workers)
    return BoundaryCorrection(kind="dirichlet", layers=m, aggregate=aggregate,
                              pieces=pieces, skipped=np.flatnonzero(zero_mask))


def neumann_correction(geom, field, aux, q_edges, m, robin_b=None, A=None,
                       tol=1e-10, workers=None):
    """Flux correction over Gamma_N (mixed) or the whole boundary (Robin).

    Passing robin_b switches to the Robin flavor: the operator gains the
    boundary mass term and every boundary edge contributes to the loads.
    Interior elements are exactly zero and skipped.
    """
    robin = robin_b is not None
    if A is None:
        A = fem.operator_matrix(geom, field, robin_b=robin_b)
    rhs_rows, zero_mask = _flux_loads(geom, q_edges, scope="boundary" if robin else "gamma_n")
    aggregate, pieces = _solve_pieces(geom, aux, A, rhs_rows, zero_mask, m, tol, workers)
    return BoundaryCorrection(kind="robin-flux" if robin else "neumann", layers=m,
                              aggregate=aggregate, pieces=pieces,
                              skipped=np.flatnonzero(zero_mask))


def correction_error_report(corr_m, corr_glo, geom, field, robin_b=None):
    """Relative energy and L2 distances between a corrector and its oracle."""
    if corr_m.kind != corr_glo.kind:
        raise ValueError("corrections have different kinds")
    den_a = fem.norm(geom, field, corr_glo.aggregate, "energy-a", robin_b=robin_b)
    den_l = fem.norm(geom, field, corr_glo.aggregate, "L2")
    if den_a == 0.0 or den_l == 0.0:
        raise DegenerateCorrection(
            f"{corr_glo.kind} oracle correction has no energy; error ratios undefined")
    diff = corr_m.aggregate - corr_glo.aggregate
    err_a = fem.norm(geom, field, diff, "energy-a", robin_b=robin_b) / den_a
    err_l = fem.norm(geom, field, diff, "L2") / den_l
    return err_a, err_l
