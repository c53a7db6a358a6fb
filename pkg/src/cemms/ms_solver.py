"""End-to-end multiscale solves for the mixed and Robin model problems.

The coarse Galerkin system is assembled as Psi^T A Psi with Psi the sparse
basis matrix, so the coarse problem reuses the fine assembly exactly.  The
reconstruction adds back the boundary corrections and (for mixed problems)
the Dirichlet lift.
"""

import time
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.linalg as sla

from cemms import fem


class CoarseSystemError(RuntimeError):
    """Coarse Gram matrix is numerically singular (dependent basis columns)."""

    def __init__(self, message, pivot):
        super().__init__(message)
        self.pivot = pivot


@dataclass(frozen=True, eq=False)
class SolveReport:
    """Everything produced by one multiscale solve."""

    problem: str
    layers: object
    l_m: int
    coeffs: np.ndarray         # coarse solution coefficients, index (i, j)
    w_m: np.ndarray            # coarse-space part as a fine nodal vector
    u_ms: np.ndarray           # reconstructed solution
    dirichlet_part: np.ndarray
    flux_part: np.ndarray
    u_ref: np.ndarray = None
    err_energy: float = None   # relative energy error vs the reference
    err_l2: float = None
    ref_norm_a: float = None
    ref_norm_l2: float = None
    spectral_gap: float = None
    top_kept: float = None
    oracle: bool = False
    timings: dict = dc_field(default_factory=dict)


def _coarse_solve(Psi, A, b_fine):
    B = (Psi.T @ (A @ Psi)).toarray()
    B = 0.5 * (B + B.T)
    rhs = Psi.T @ b_fine
    try:
        c, low = sla.cho_factor(B, check_finite=False)
    except np.linalg.LinAlgError as exc:
        pivot = _pivot_from_message(str(exc))
        raise CoarseSystemError(
            f"coarse Gram matrix not positive definite (pivot {pivot}): "
            "basis columns are linearly dependent", pivot) from exc
    return sla.cho_solve((c, low), rhs, check_finite=False)


def _pivot_from_message(msg):
    for tok in msg.replace("-", " ").split():
        if tok.isdigit():
            return int(tok)
    return -1


def _reference(geom, field, data, problem, u_ref, compute_ref, tol):
    if u_ref is not None or not compute_ref:
        return u_ref
    return fem.fine_reference_solve(geom, field, data, problem=problem, tol=tol)


def solve_mixed(geom, field, ktilde, aux, Psi, d_corr, n_corr, data,
                A=None, u_ref=None, compute_ref=True, tol=1e-10, oracle=False):
    """Steps 3-4 for the mixed Dirichlet/Neumann problem.

    Right side: source term, minus the lift energy, plus the boundary flux,
    plus the energy of the Dirichlet corrector, minus that of the flux
    corrector; reconstruction  u = w - D g + N q + g.
    """
    t0 = time.perf_counter()
    if A is None:
        A = fem.stiffness_matrix(geom, field.values)
    g = np.asarray(data.g_tilde, dtype=np.float64)
    d_agg = d_corr.aggregate if d_corr is not None else np.zeros(geom.n_nodes)
    n_agg = n_corr.aggregate if n_corr is not None else np.zeros(geom.n_nodes)

    b_fine = fem.assemble_load(geom, None, "source-f", data.f)
    b_fine += fem.assemble_load(geom, None, "neumann-q", data.q, edge_scope="gamma_n")
    b_fine -= A @ g
    b_fine += A @ d_agg
    b_fine -= A @ n_agg

    coeffs = _coarse_solve(Psi, A, b_fine)
    w = Psi @ coeffs
    u_ms = w - d_agg + n_agg + g
    t_solve = time.perf_counter() - t0

    u_ref = _reference(geom, field, data, "mixed", u_ref, compute_ref, tol)
    report = _metrics(geom, field, None, u_ms, u_ref)
    layers = "global" if oracle else (d_corr.layers if d_corr is not None else None)
    return SolveReport(problem="mixed", layers=layers, l_m=aux.l_m, coeffs=coeffs,
                       w_m=w, u_ms=u_ms, dirichlet_part=d_agg, flux_part=n_agg,
                       u_ref=u_ref, spectral_gap=aux.spectral_gap,
                       top_kept=aux.top_kept, oracle=oracle,
                       timings={"solve": t_solve}, **report)


def solve_robin(geom, field, ktilde, aux, Psi, n_corr, data,
                A=None, u_ref=None, compute_ref=True, tol=1e-10, oracle=False):
    """Steps 3-4 for the Robin problem (modified operator, no lift)."""
    t0 = time.perf_counter()
    if data.b is None:
        raise ValueError("Robin solve needs data.b")
    if A is None:
        A = fem.operator_matrix(geom, field, robin_b=data.b)
    n_agg = n_corr.aggregate if n_corr is not None else np.zeros(geom.n_nodes)

    b_fine = fem.assemble_load(geom, None, "source-f", data.f)
    b_fine += fem.assemble_load(geom, None, "neumann-q", data.q, edge_scope="boundary")
    b_fine -= A @ n_agg

    coeffs = _coarse_solve(Psi, A, b_fine)
    w = Psi @ coeffs
    u_ms = w + n_agg
    t_solve = time.perf_counter() - t0

    u_ref = _reference(geom, field, data, "robin", u_ref, compute_ref, tol)
    report = _metrics(geom, field, data.b, u_ms, u_ref)
    layers = "global" if oracle else (n_corr.layers if n_corr is not None else None)
    return SolveReport(problem="robin", layers=layers, l_m=aux.l_m, coeffs=coeffs,
                       w_m=w, u_ms=u_ms, dirichlet_part=np.zeros(geom.n_nodes),
                       flux_part=n_agg, u_ref=u_ref, spectral_gap=aux.spectral_gap,
                       top_kept=aux.top_kept, oracle=oracle,
                       timings={"solve": t_solve}, **report)


def solve_oracle_global(geom, field, ktilde, aux, Psi_glo, d_glo, n_glo, data,
                        problem="mixed", A=None, u_ref=None, compute_ref=True,
                        tol=1e-10):
    """The localization-free solve used to isolate the global multiscale error."""
    if problem == "mixed":
        return solve_mixed(geom, field, ktilde, aux, Psi_glo, d_glo, n_glo, data,
                           A=A, u_ref=u_ref, compute_ref=compute_ref, tol=tol,
                           oracle=True)
    if problem == "robin":
        return solve_robin(geom, field, ktilde, aux, Psi_glo, n_glo, data,
                           A=A, u_ref=u_ref, compute_ref=compute_ref, tol=tol,
                           oracle=True)
    raise ValueError(f"unknown problem kind {problem!r}")


def _metrics(geom, field, robin_b, u_ms, u_ref):
    """Relative errors vs the reference; absolute when the reference is zero."""
    out = {"err_energy": None, "err_l2": None, "ref_norm_a": None, "ref_norm_l2": None}
    if u_ref is None:
        return out
    na = fem.norm(geom, field, u_ref, "energy-a", robin_b=robin_b)
    nl = fem.norm(geom, field, u_ref, "L2")
    out["ref_norm_a"] = na
    out["ref_norm_l2"] = nl
    diff = u_ms - u_ref
    out["err_energy"] = fem.norm(geom, field, diff, "energy-a", robin_b=robin_b) / (na or 1.0)
    out["err_l2"] = fem.norm(geom, field, diff, "L2") / (nl or 1.0)
    return out
