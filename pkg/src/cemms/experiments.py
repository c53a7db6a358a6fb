"""Experiment harness: config parsing, sweep execution, CSV emission.

Config files are line-oriented ``key = value`` ASCII with ``#`` comments
and comma-separated lists.  Sweep tables and decay tables are written as
CSV with deterministic row order; error-ratio values below 1e-6 print as
``<1.000000e-6``.  The sweep table carries a wall-time column (the one
nondeterministic column); decay tables carry none, so repeated runs of a
decay study are byte-identical.
"""

import os
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from cemms import boundary_ops, cem_basis, fem, media, ms_solver, theory
from cemms._kernels import BACKEND
from cemms.aux_space import build_aux_basis
from cemms.media import ProblemData
from cemms.mesh import build_grids
from cemms.theory import auto_layers

BELOW_THRESHOLD = "<1.000000e-6"
RATIO_COLUMNS = {"D_a", "D_L", "N_a", "N_L", "E_a", "E_L"}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    problem: str = "model1-dirichlet"
    n_coarse: int = 10
    refine: int = 8
    l_m: int = 2
    m: object = (1, 2, 3, 4)     # tuple of ints, or "auto"
    contrast: tuple = (1e4,)
    medium: str = "synth:channels"
    density: float = 0.15
    seed: int = 0
    gtilde: str = "zero"
    f: str = "zero"
    q: str = "zero"
    b: str = "none"
    kappa_tilde: str = "scaled-24"
    output: str = "out"
    workers: int = 0
    allow_large: bool = False
    oracle: str = "auto"         # auto | on | off
    dump_solution: bool = False


_PROBLEMS = ("model1-dirichlet", "model2-mixed", "model3-robin")
_DEFAULTS = {
    "model1-dirichlet": {"gtilde": "model1", "f": "four-quadrant", "q": "zero", "b": "none"},
    "model2-mixed": {"gtilde": "zero", "f": "four-quadrant", "q": "model2", "b": "none"},
    "model3-robin": {"gtilde": "zero", "f": "four-quadrant", "q": "model3", "b": "kappa"},
}


def parse_config(path, allow_large=False):
    """Parse and validate a config file into an ExperimentConfig."""
    raw = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected 'key = value'")
            key, val = (part.strip() for part in line.split("=", 1))
            raw[key] = val
    if allow_large:
        raw["allow_large"] = "true"
    return config_from_dict(raw, origin=path)


def config_from_dict(raw, origin="<config>"):
    cfg = ExperimentConfig()
    raw = dict(raw)
    problem = raw.pop("problem", cfg.problem)
    if problem not in _PROBLEMS:
        raise ConfigError(f"{origin}: unknown problem {problem!r}")
    cfg.problem = problem
    for key, val in _DEFAULTS[problem].items():
        setattr(cfg, key, val)

    def pop_int(key, default):
        v = raw.pop(key, None)
        if v is None:
            return default
        try:
            return int(v)
        except ValueError as exc:
            raise ConfigError(f"{origin}: {key} must be an integer, got {v!r}") from exc

    def pop_float(key, default):
        v = raw.pop(key, None)
        if v is None:
            return default
        try:
            return float(v)
        except ValueError as exc:
            raise ConfigError(f"{origin}: {key} must be a number, got {v!r}") from exc

    def pop_bool(key, default):
        v = raw.pop(key, None)
        if v is None:
            return default
        if str(v).lower() in ("1", "true", "yes", "on"):
            return True
        if str(v).lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{origin}: {key} must be a boolean, got {v!r}")

    cfg.n_coarse = pop_int("n_coarse", cfg.n_coarse)
    cfg.refine = pop_int("refine", cfg.refine)
    cfg.l_m = pop_int("l_m", cfg.l_m)
    cfg.seed = pop_int("seed", cfg.seed)
    cfg.workers = pop_int("workers", cfg.workers)
    cfg.density = pop_float("density", cfg.density)
    cfg.allow_large = pop_bool("allow_large", cfg.allow_large)
    cfg.dump_solution = pop_bool("dump_solution", cfg.dump_solution)

    m_raw = raw.pop("m", None)
    if m_raw is not None:
        if m_raw.strip() == "auto":
            cfg.m = "auto"
        else:
            try:
                cfg.m = tuple(int(tok) for tok in m_raw.split(","))
            except ValueError as exc:
                raise ConfigError(f"{origin}: m must be integers or 'auto'") from exc
            if any(mm < 1 for mm in cfg.m):
                raise ConfigError(f"{origin}: oversampling layers must be >= 1")

    c_raw = raw.pop("contrast", None)
    if c_raw is not None:
        try:
            cfg.contrast = tuple(float(tok) for tok in c_raw.split(","))
        except ValueError as exc:
            raise ConfigError(f"{origin}: contrast must be numbers") from exc
        if any(c < 1.0 for c in cfg.contrast):
            raise ConfigError(f"{origin}: contrast ratios must be >= 1")

    for key in ("medium", "gtilde", "f", "q", "b", "output", "oracle", "kappa_tilde"):
        if key in raw:
            setattr(cfg, key, raw.pop(key))
    if raw:
        raise ConfigError(f"{origin}: unknown keys {sorted(raw)}")

    if cfg.n_coarse < 2 or cfg.refine < 2:
        raise ConfigError(f"{origin}: n_coarse and refine must be >= 2")
    if cfg.l_m < 0:
        raise ConfigError(f"{origin}: l_m must be >= 0")
    if not (0.0 <= cfg.density < 1.0):
        raise ConfigError(f"{origin}: density must be in [0, 1)")
    if cfg.oracle not in ("auto", "on", "off"):
        raise ConfigError(f"{origin}: oracle must be auto/on/off")
    if cfg.problem == "model3-robin" and cfg.b in ("none", "zero"):
        raise ConfigError(f"{origin}: model3-robin needs a Robin coefficient preset b")
    n_axis = cfg.n_coarse * cfg.refine
    if n_axis > 200 and not cfg.allow_large:
        raise ConfigError(
            f"{origin}: fine grid {n_axis} per axis exceeds the desk-scale cap 200 "
            "(set allow_large = true to override)")
    return cfg


# ---------------------------------------------------------------------------
# data presets

def _const_or(preset, table, what):
    try:
        return float(preset), None
    except (TypeError, ValueError):
        pass
    if preset in table:
        return None, table[preset]
    raise ConfigError(f"unknown {what} preset {preset!r}")


def gtilde_values(preset, geom):
    table = {
        "zero": lambda x, y: np.zeros_like(x),
        "one": lambda x, y: np.ones_like(x),
        "linear-x": lambda x, y: x,
        "model1": lambda x, y: x ** 2 + np.exp(x * y),
    }
    const, fn = _const_or(preset, table, "gtilde")
    x, y = geom.nodes[:, 0], geom.nodes[:, 1]
    return np.full(geom.n_nodes, const) if fn is None else fn(x, y)


def source_values(preset, geom):
    def four_quadrant(x, y):
        out = np.empty_like(x)
        out[(x < 0.5) & (y < 0.5)] = 1.0
        out[(x >= 0.5) & (y < 0.5)] = 2.0
        out[(x < 0.5) & (y >= 0.5)] = -1.0
        out[(x >= 0.5) & (y >= 0.5)] = 0.0
        return out

    table = {
        "zero": lambda x, y: np.zeros_like(x),
        "one": lambda x, y: np.ones_like(x),
        "four-quadrant": four_quadrant,
    }
    const, fn = _const_or(preset, table, "f")
    n = geom.n_fine
    cell = np.arange(geom.n_cells)
    x = (cell % n + 0.5) * geom.h
    y = (cell // n + 0.5) * geom.h
    return np.full(geom.n_cells, const) if fn is None else fn(x, y)


def flux_values(preset, geom):
    """Per-boundary-edge flux evaluated at edge midpoints."""
    def model2(x, y, side):
        out = np.zeros_like(x)
        out[side == 3] = -1.0
        out[side == 1] = 1.0
        out[(side == 0) & (x < 0.5)] = 1.0
        return out

    def model3(x, y, side):
        out = model2(x, y, side)
        out[(side == 2) & (x >= 0.5)] = -1.0
        return out

    table = {
        "zero": lambda x, y, side: np.zeros_like(x),
        "one": lambda x, y, side: np.ones_like(x),
        "model2": model2,
        "model3": model3,
    }
    const, fn = _const_or(preset, table, "q")
    if fn is None:
        return np.full(len(geom.edge_side), const)
    return fn(geom.edge_mid[:, 0], geom.edge_mid[:, 1], geom.edge_side)


def robin_values(preset, geom, field):
    if preset in ("none",):
        return None
    if preset == "kappa":
        return field.values[geom.edge_cell].copy()
    if preset == "one":
        return np.ones(len(geom.edge_side))
    try:
        return np.full(len(geom.edge_side), float(preset))
    except ValueError as exc:
        raise ConfigError(f"unknown b preset {preset!r}") from exc


def build_problem_data(cfg, geom, field):
    return ProblemData(
        f=source_values(cfg.f, geom),
        g_tilde=gtilde_values(cfg.gtilde, geom),
        q=flux_values(cfg.q, geom),
        b=robin_values(cfg.b, geom, field) if cfg.problem == "model3-robin" else None,
    )


def boundary_spec_for(problem):
    if problem == "model1-dirichlet":
        return "dirichlet"
    if problem == "model2-mixed":
        return {"top": "D", "bottom": "N", "left": "N", "right": "N"}
    return "neumann"


def medium_field(cfg, geom, contrast):
    if cfg.medium.startswith("synth:"):
        style = cfg.medium.split(":", 1)[1]
        return media.synth_channels(geom, style, cfg.density, cfg.seed,
                                    kappa_m=1.0, kappa_I=contrast)
    return media.load_field(cfg.medium, geom, kappa_m=1.0, kappa_I=contrast)


# ---------------------------------------------------------------------------
# formatting

def _fmt(value, ratio=False):
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    if not np.isfinite(v):
        raise RuntimeError("non-finite value in output table")
    if ratio and abs(v) < 1e-6:
        return BELOW_THRESHOLD
    return f"{v:.6e}"


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = [_fmt(v, ratio=(name in RATIO_COLUMNS)) for name, v in zip(header, row)]
            fh.write(",".join(cells) + "\n")


def resolve_workers(cfg_workers=0):
    env = os.environ.get("CEMMS_THREADS")
    if cfg_workers and cfg_workers > 0:
        return cfg_workers
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# pipeline pieces shared by both runners

@dataclass
class _Stage:
    """Everything built for one contrast value."""

    field: object
    ktilde: np.ndarray
    data: object
    aux: object
    A: object
    robin_b: object
    u_ref: np.ndarray
    d_glo: object = None
    n_glo: object = None
    constants: object = None
    psi_cache: dict = dc_field(default_factory=dict)


def _oracle_enabled(cfg):
    if cfg.oracle == "on":
        return True
    if cfg.oracle == "off":
        return False
    return cfg.n_coarse <= 10 and cfg.refine <= 8


def _needs_dirichlet(cfg, data, geom):
    if cfg.problem == "model3-robin":
        return False
    g = data.g_tilde
    return bool(np.any(g != g[0]))


def _needs_flux(cfg, data):
    if cfg.problem == "model1-dirichlet":
        return False
    return bool(np.any(data.q != 0.0))


def _build_stage(cfg, geom, contrast, workers, want_oracle, want_ref=True):
    field = medium_field(cfg, geom, contrast)
    ktilde = media.derive_kappa_tilde(field, geom, cfg.kappa_tilde)
    data = build_problem_data(cfg, geom, field)
    robin_b = data.b if cfg.problem == "model3-robin" else None
    aux = build_aux_basis(geom, field, ktilde, cfg.l_m, robin_b=robin_b, workers=workers)
    A = fem.operator_matrix(geom, field, robin_b=robin_b)
    u_ref = None
    if want_ref:
        problem = "robin" if cfg.problem == "model3-robin" else "mixed"
        u_ref = fem.fine_reference_solve(geom, field, data, problem=problem)
    stage = _Stage(field=field, ktilde=ktilde, data=data, aux=aux, A=A,
                   robin_b=robin_b, u_ref=u_ref,
                   constants=theory.theory_constants(aux.spectral_gap))
    if want_oracle:
        if _needs_dirichlet(cfg, data, geom):
            stage.d_glo = boundary_ops.dirichlet_correction(
                geom, field, aux, data.g_tilde, "global", A=A, workers=workers)
        if _needs_flux(cfg, data):
            stage.n_glo = boundary_ops.neumann_correction(
                geom, field, aux, data.q, "global", robin_b=robin_b, A=A, workers=workers)
    return stage


def _solve_at_m(cfg, geom, stage, m, workers):
    aux, A, data = stage.aux, stage.A, stage.data
    field = stage.field
    d_m = n_m = None
    if _needs_dirichlet(cfg, data, geom):
        d_m = boundary_ops.dirichlet_correction(geom, field, aux, data.g_tilde, m,
                                                A=A, workers=workers)
    if _needs_flux(cfg, data):
        n_m = boundary_ops.neumann_correction(geom, field, aux, data.q, m,
                                              robin_b=stage.robin_b, A=A, workers=workers)
    Psi = stage.psi_cache.get(m)
    if Psi is None:
        Psi = cem_basis.build_basis_matrix(geom, field, aux, m, A=A,
                                           robin_b=stage.robin_b, workers=workers)
        stage.psi_cache[m] = Psi
    if cfg.problem == "model3-robin":
        report = ms_solver.solve_robin(geom, field, stage.ktilde, aux, Psi, n_m, data,
                                       A=A, u_ref=stage.u_ref)
    else:
        report = ms_solver.solve_mixed(geom, field, stage.ktilde, aux, Psi, d_m, n_m,
                                       data, A=A, u_ref=stage.u_ref)
    return report, d_m, n_m


def _m_list(cfg, stage, geom):
    if cfg.m == "auto":
        return (min(auto_layers(stage.aux.spectral_gap, geom.H), geom.n_coarse - 1),)
    return cfg.m


def _clean_dir(outdir, created):
    for path in created:
        try:
            os.remove(path)
        except OSError:
            pass


def run_experiment(cfg):
    """Run the sweep table for a config; returns {name: path} of outputs."""
    geom = build_grids(cfg.n_coarse, cfg.refine, boundary_spec_for(cfg.problem))
    workers = resolve_workers(cfg.workers)
    want_oracle = _oracle_enabled(cfg)
    os.makedirs(cfg.output, exist_ok=True)
    table_path = os.path.join(cfg.output, "sweep.csv")
    summary_path = os.path.join(cfg.output, "summary.txt")
    created = [table_path, summary_path]

    ratio_cols = []
    if want_oracle:
        if cfg.problem == "model1-dirichlet":
            ratio_cols = ["D_a", "D_L"]
        elif cfg.problem == "model2-mixed":
            ratio_cols = ["N_a", "N_L"]
        else:
            ratio_cols = ["N_a", "N_L"]
    header = (["m", "H", "contrast", "l_m"] + ratio_cols +
              ["E_a", "E_L", "Lambda_prime", "Lambda", "u_ref_a", "u_ref_L2", "wall_time"])

    rows = []
    summary_lines = [
        f"problem: {cfg.problem}",
        f"grid: n_coarse={cfg.n_coarse} refine={cfg.refine} "
        f"(fine {geom.n_fine}x{geom.n_fine}, H={geom.H:.6e})",
        f"l_m: {cfg.l_m}   kappa_tilde: {cfg.kappa_tilde}   kernel backend: {BACKEND}",
        f"medium: {cfg.medium} density={cfg.density} seed={cfg.seed}",
        f"data presets: gtilde={cfg.gtilde} f={cfg.f} q={cfg.q} b={cfg.b}",
        "source preset 'four-quadrant' is the built-in piecewise-constant "
        "substitute with quadrant values (1, 2, -1, 0)",
        f"oracle corrections: {'on' if want_oracle else 'off'}",
    ]
    try:
        for contrast in cfg.contrast:
            t_stage = time.perf_counter()
            stage = _build_stage(cfg, geom, contrast, workers, want_oracle)
            summary_lines.append(
                f"contrast {contrast:.6e}: Lambda={stage.aux.spectral_gap:.6e} "
                f"Lambda'={stage.aux.top_kept:.6e} theta={stage.constants.theta:.6e} "
                f"(stage build {time.perf_counter() - t_stage:.2f}s)")
            if stage.aux.cluster_warnings.size:
                summary_lines.append(
                    f"  warning: eigenvalue cluster at truncation in elements "
                    f"{stage.aux.cluster_warnings.tolist()}")
            for m in _m_list(cfg, stage, geom):
                t0 = time.perf_counter()
                report, d_m, n_m = _solve_at_m(cfg, geom, stage, m, workers)
                ratios = []
                if want_oracle:
                    if cfg.problem == "model1-dirichlet":
                        pair = (d_m, stage.d_glo)
                    else:
                        pair = (n_m, stage.n_glo)
                    if pair[0] is not None and pair[1] is not None:
                        ratios = list(boundary_ops.correction_error_report(
                            pair[0], pair[1], geom, stage.field, robin_b=stage.robin_b))
                    else:
                        ratios = [None, None]
                wall = time.perf_counter() - t0
                rows.append([m, geom.H, contrast, cfg.l_m] + ratios +
                            [report.err_energy, report.err_l2, stage.aux.top_kept,
                             stage.aux.spectral_gap, report.ref_norm_a,
                             report.ref_norm_l2, wall])
                if cfg.dump_solution:
                    dump = os.path.join(cfg.output,
                                        f"solution_c{contrast:.0e}_m{m}.txt")
                    media.dump_nodal(dump, geom, report.u_ms)
                    created.append(dump)
        _write_csv(table_path, header, rows)
        with open(summary_path, "w") as fh:
            fh.write("\n".join(summary_lines) + "\n")
    except Exception:
        _clean_dir(cfg.output, created)
        raise
    return {"sweep": table_path, "summary": summary_path}


def run_decay_study(cfg):
    """Decay profiles and correction-convergence tables (no timing columns)."""
    geom = build_grids(cfg.n_coarse, cfg.refine, boundary_spec_for(cfg.problem))
    workers = resolve_workers(cfg.workers)
    want_oracle = _oracle_enabled(cfg)
    os.makedirs(cfg.output, exist_ok=True)
    prof_path = os.path.join(cfg.output, "decay_profiles.csv")
    corr_path = os.path.join(cfg.output, "correction_decay.csv")
    summary_path = os.path.join(cfg.output, "decay_summary.txt")
    created = [prof_path, corr_path, summary_path]

    nc = geom.n_coarse
    sample_elements = sorted({
        geom.element_at(nc // 2, nc // 2),
        geom.element_at(0, nc // 2),
        geom.element_at(0, 0),
    })
    dirichlet_kind = cfg.problem == "model1-dirichlet"
    corr_cols = ["D_a", "D_L"] if dirichlet_kind else ["N_a", "N_L"]

    prof_rows, corr_rows, summary_lines = [], [], []
    summary_lines.append(f"problem: {cfg.problem}  decay study  backend: {BACKEND}")
    try:
        for contrast in cfg.contrast:
            stage = _build_stage(cfg, geom, contrast, workers, want_oracle, want_ref=False)
            theta = stage.constants.theta
            summary_lines.append(
                f"contrast {contrast:.6e}: Lambda={stage.aux.spectral_gap:.6e} "
                f"theta={theta:.6e} oracle={'global' if want_oracle else 'proxy'}")
            for i in sample_elements:
                for j in range(cfg.l_m + 1):
                    if want_oracle:
                        basis = cem_basis.build_global_basis(
                            geom, stage.field, stage.aux, i, j, A=stage.A,
                            robin_b=stage.robin_b)
                    else:
                        m_proxy = min(nc - 1, max(_m_list(cfg, stage, geom)) + 2)
                        basis = cem_basis.build_ms_basis(
                            geom, stage.field, stage.aux, i, j, m_proxy, A=stage.A,
                            robin_b=stage.robin_b)
                    profile = cem_basis.decay_profile(geom, stage.field, stage.aux,
                                                      stage.ktilde, basis,
                                                      robin_b=stage.robin_b)
                    for mp, value in enumerate(profile):
                        prof_rows.append([contrast, i, j, mp, value, theta,
                                          stage.aux.spectral_gap])
            for m in _m_list(cfg, stage, geom):
                if dirichlet_kind:
                    corr = boundary_ops.dirichlet_correction(
                        geom, stage.field, stage.aux, stage.data.g_tilde, m,
                        A=stage.A, workers=workers)
                    oracle = stage.d_glo
                else:
                    corr = boundary_ops.neumann_correction(
                        geom, stage.field, stage.aux, stage.data.q, m,
                        robin_b=stage.robin_b, A=stage.A, workers=workers)
                    oracle = stage.n_glo
                if oracle is None:
                    continue
                err_a, err_l = boundary_ops.correction_error_report(
                    corr, oracle, geom, stage.field, robin_b=stage.robin_b)
                corr_rows.append([contrast, m, err_a, err_l])
        _write_csv(prof_path, ["contrast", "element", "eigindex", "m_prime",
                               "profile", "theta", "Lambda"], prof_rows)
        _write_csv(corr_path, ["contrast", "m"] + corr_cols, corr_rows)
        with open(summary_path, "w") as fh:
            fh.write("\n".join(summary_lines) + "\n")
    except Exception:
        _clean_dir(cfg.output, created)
        raise
    return {"profiles": prof_path, "corrections": corr_path, "summary": summary_path}
