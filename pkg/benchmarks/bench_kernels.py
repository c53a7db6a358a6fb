"""Benchmark the compiled kernels against the numpy fallback.

Times the two hot paths on a representative multiscale workload: the
penalized region solves behind basis construction, and the cellwise
quadratic forms behind norm/decay evaluation.

    python benchmarks/bench_kernels.py [--n-coarse 10] [--refine 8] [--reps 5]
"""

import argparse
import time

import numpy as np

from cemms import fem, media
from cemms._kernels import _fallback
from cemms.aux_space import build_aux_basis
from cemms.cem_basis import RegionOperator, _moment_row
from cemms.mesh import build_grids, oversample_region

try:
    from cemms._kernels import _core
except ImportError:
    _core = None


def _time(fn, reps):
    best = np.inf
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _pcg_workload(backend, op, rhs_rows):
    import cemms._kernels as kernels
    saved = kernels.pcg
    kernels.pcg = backend.pcg
    try:
        for rhs in rhs_rows:
            op.solve(rhs, tol=1e-10)
    finally:
        kernels.pcg = saved


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-coarse", type=int, default=10)
    ap.add_argument("--refine", type=int, default=8)
    ap.add_argument("--reps", type=int, default=5)
    args = ap.parse_args()

    geom = build_grids(args.n_coarse, args.refine, "dirichlet")
    field = media.synth_channels(geom, "channels", 0.15, 7, kappa_I=1e4)
    kt = media.derive_kappa_tilde(field, geom)
    aux = build_aux_basis(geom, field, kt, l_m=2)
    A = fem.operator_matrix(geom, field)

    i = geom.element_at(args.n_coarse // 2, args.n_coarse // 2)
    op = RegionOperator(geom, aux, A, oversample_region(geom, i, 2))
    rhs_rows = [_moment_row(aux, i, j) for j in range(aux.n_kept)]

    rng = np.random.default_rng(0)
    v = rng.standard_normal(geom.n_nodes)
    coef = np.ascontiguousarray(field.values)

    backends = [("numpy", _fallback)] + ([("compiled", _core)] if _core else [])
    print(f"grid {geom.n_fine}x{geom.n_fine}, region DOFs {len(op.free)}, "
          f"{len(rhs_rows)} penalized solves per rep")
    print(f"{'kernel':<22}{'backend':<12}{'best time':>12}")
    results = {}
    for name, backend in backends:
        t = _time(lambda b=backend: _pcg_workload(b, op, rhs_rows), args.reps)
        results[("pcg", name)] = t
        print(f"{'penalized pcg':<22}{name:<12}{t * 1e3:>10.2f}ms")
    for name, backend in backends:
        t = _time(lambda b=backend: b.cell_quadratic(geom.cells, coef, fem.K_REF, v),
                  args.reps * 20)
        results[("quad", name)] = t
        print(f"{'cell quadratic form':<22}{name:<12}{t * 1e6:>10.1f}us")
    if _core is not None:
        print(f"\nspeedup compiled vs numpy: "
              f"pcg {results[('pcg', 'numpy')] / results[('pcg', 'compiled')]:.2f}x, "
              f"quadratic {results[('quad', 'numpy')] / results[('quad', 'compiled')]:.2f}x")
    else:
        print("\ncompiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
