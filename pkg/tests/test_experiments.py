import os

import numpy as np
import pytest

from cemms import cli, experiments as xp, media
from cemms.fem import SolverFailure
from cemms.mesh import build_grids


def _write(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


BASE_CFG = """
# tiny model-1 run
problem = model1-dirichlet
n_coarse = 4
refine = 4
l_m = 1
m = 1,2
contrast = 1
medium = synth:inclusions
density = 0.2
seed = 3
output = {out}
"""


def test_parse_config_roundtrip(tmp_path):
    cfg = xp.parse_config(_write(tmp_path, BASE_CFG.format(out=tmp_path / "o")))
    assert cfg.problem == "model1-dirichlet"
    assert cfg.m == (1, 2)
    assert cfg.contrast == (1.0,)
    assert cfg.gtilde == "model1" and cfg.f == "four-quadrant"


@pytest.mark.parametrize("line,match", [
    ("problem = model9", "unknown problem"),
    ("n_coarse = x", "integer"),
    ("m = 0", ">= 1"),
    ("contrast = 0.5", ">= 1"),
    ("density = 1.5", "density"),
    ("oracle = maybe", "oracle"),
    ("wibble = 3", "unknown keys"),
])
def test_parse_config_rejects(tmp_path, line, match):
    text = BASE_CFG.format(out=tmp_path / "o") + line + "\n"
    with pytest.raises(xp.ConfigError, match=match):
        xp.parse_config(_write(tmp_path, text))


def test_parse_config_syntax_error(tmp_path):
    with pytest.raises(xp.ConfigError, match="key = value"):
        xp.parse_config(_write(tmp_path, "just words\n"))


def test_robin_requires_b(tmp_path):
    text = BASE_CFG.format(out=tmp_path / "o").replace("model1-dirichlet", "model3-robin")
    text += "b = none\n"
    with pytest.raises(xp.ConfigError, match="Robin"):
        xp.parse_config(_write(tmp_path, text))


def test_desk_scale_cap(tmp_path):
    text = BASE_CFG.format(out=tmp_path / "o").replace("n_coarse = 4", "n_coarse = 30")
    text = text.replace("refine = 4", "refine = 8")
    with pytest.raises(xp.ConfigError, match="desk-scale"):
        xp.parse_config(_write(tmp_path, text))
    cfg = xp.parse_config(_write(tmp_path, text), allow_large=True)
    assert cfg.allow_large


def test_presets_match_closed_forms():
    geom = build_grids(4, 4, "dirichlet")
    g = xp.gtilde_values("model1", geom)
    x, y = geom.nodes[:, 0], geom.nodes[:, 1]
    assert np.allclose(g, x ** 2 + np.exp(x * y))
    f = xp.source_values("four-quadrant", geom)
    assert set(np.unique(f)) == {1.0, 2.0, -1.0, 0.0}
    gm = build_grids(4, 4, {"top": "D", "bottom": "N", "left": "N", "right": "N"})
    q = xp.flux_values("model2", gm)
    assert np.all(q[gm.edge_side == 3] == -1.0)
    assert np.all(q[gm.edge_side == 1] == 1.0)
    bottom_left = (gm.edge_side == 0) & (gm.edge_mid[:, 0] < 0.5)
    bottom_right = (gm.edge_side == 0) & (gm.edge_mid[:, 0] >= 0.5)
    assert np.all(q[bottom_left] == 1.0) and np.all(q[bottom_right] == 0.0)
    q3 = xp.flux_values("model3", gm)
    top_right = (gm.edge_side == 2) & (gm.edge_mid[:, 0] >= 0.5)
    assert np.all(q3[top_right] == -1.0)
    # numeric literals act as constant presets
    assert np.all(xp.gtilde_values("2.5", geom) == 2.5)


def test_robin_b_kappa_preset():
    geom = build_grids(2, 2, "neumann")
    field = media.synth_channels(geom, "boundary-channels", 0.3, 1, kappa_I=100.0)
    b = xp.robin_values("kappa", geom, field)
    assert np.array_equal(b, field.values[geom.edge_cell])


def test_run_experiment_rows_and_monotone(tmp_path):
    out = tmp_path / "o"
    cfg = xp.parse_config(_write(tmp_path, BASE_CFG.format(out=out)))
    paths = xp.run_experiment(cfg)
    lines = open(paths["sweep"]).read().strip().splitlines()
    header = lines[0].split(",")
    assert header[:4] == ["m", "H", "contrast", "l_m"]
    assert "D_a" in header and "E_a" in header and header[-1] == "wall_time"
    rows = [dict(zip(header, ln.split(","))) for ln in lines[1:]]
    assert len(rows) == 2
    e_a = [float(r["E_a"].lstrip("<")) for r in rows]
    assert e_a[1] < e_a[0]
    assert os.path.exists(paths["summary"])
    assert "four-quadrant" in open(paths["summary"]).read()


def test_run_experiment_cartesian_rows(tmp_path):
    out = tmp_path / "o2"
    text = BASE_CFG.format(out=out).replace("contrast = 1", "contrast = 1e3,1e4")
    text = text.replace("m = 1,2", "m = 1,2,3,4")
    cfg = xp.parse_config(_write(tmp_path, text))
    paths = xp.run_experiment(cfg)
    lines = open(paths["sweep"]).read().strip().splitlines()
    assert len(lines) == 1 + 8


def test_below_threshold_formatting():
    assert xp._fmt(5e-7, ratio=True) == "<1.000000e-6"
    assert xp._fmt(5e-7, ratio=False) == "5.000000e-07"
    assert xp._fmt(2e-3, ratio=True) == "2.000000e-03"
    assert xp._fmt(None) == ""
    with pytest.raises(RuntimeError):
        xp._fmt(float("nan"))


def test_model3_constant_preset_exact(tmp_path):
    out = tmp_path / "o3"
    text = """
problem = model3-robin
n_coarse = 3
refine = 4
l_m = 1
m = 2,3
contrast = 1
medium = synth:inclusions
density = 0.0
seed = 0
gtilde = zero
f = zero
q = one
b = one
output = {out}
""".format(out=out)
    cfg = xp.parse_config(_write(tmp_path, text))
    paths = xp.run_experiment(cfg)
    lines = open(paths["sweep"]).read().strip().splitlines()
    header = lines[0].split(",")
    for ln in lines[1:]:
        row = dict(zip(header, ln.split(",")))
        assert row["E_a"].startswith("<") or float(row["E_a"]) <= 1e-6


def test_dump_solution_config(tmp_path):
    out = tmp_path / "dump"
    text = BASE_CFG.format(out=out).replace("m = 1,2", "m = 1") + "dump_solution = true\n"
    cfg = xp.parse_config(_write(tmp_path, text))
    xp.run_experiment(cfg)
    dumps = [p for p in os.listdir(out) if p.startswith("solution_")]
    assert len(dumps) == 1
    grid = media.read_grid_file(out / dumps[0])
    assert grid.shape == (17, 17)


def test_auto_layers_config(tmp_path):
    out = tmp_path / "o4"
    text = BASE_CFG.format(out=out).replace("m = 1,2", "m = auto")
    cfg = xp.parse_config(_write(tmp_path, text))
    paths = xp.run_experiment(cfg)
    lines = open(paths["sweep"]).read().strip().splitlines()
    assert len(lines) == 2   # one auto-selected m
    assert int(lines[1].split(",")[0]) == cfg.n_coarse - 1


def test_decay_study_outputs(tmp_path):
    out = tmp_path / "d"
    text = BASE_CFG.format(out=out)
    cfg = xp.parse_config(_write(tmp_path, text))
    paths = xp.run_decay_study(cfg)
    prof = open(paths["profiles"]).read().strip().splitlines()
    assert prof[0] == "contrast,element,eigindex,m_prime,profile,theta,Lambda"
    body = [ln.split(",") for ln in prof[1:]]
    # profiles nonincreasing per (element, eigindex), last entry zero
    series = {}
    for row in body:
        series.setdefault((row[1], row[2]), []).append(float(row[4]))
    for vals in series.values():
        assert all(b <= a + 1e-14 for a, b in zip(vals, vals[1:]))
        assert vals[-1] == 0.0
    corr = open(paths["corrections"]).read().strip().splitlines()
    assert corr[0] == "contrast,m,D_a,D_L"
    assert len(corr) == 1 + len(cfg.m)


def test_decay_study_byte_identical(tmp_path):
    texts = []
    for run in ("r1", "r2"):
        out = tmp_path / run
        cfg = xp.parse_config(_write(tmp_path, BASE_CFG.format(out=out), name=f"{run}.cfg"))
        paths = xp.run_decay_study(cfg)
        texts.append((open(paths["profiles"], "rb").read(),
                      open(paths["corrections"], "rb").read()))
    assert texts[0] == texts[1]


def test_run_experiment_reproducible_modulo_walltime(tmp_path):
    outs = []
    for run in ("ra", "rb"):
        out = tmp_path / run
        cfg = xp.parse_config(_write(tmp_path, BASE_CFG.format(out=out), name=f"{run}.cfg"))
        paths = xp.run_experiment(cfg)
        lines = open(paths["sweep"]).read().strip().splitlines()
        outs.append(["," .join(ln.split(",")[:-1]) for ln in lines])
    assert outs[0] == outs[1]


def test_failure_removes_partial_outputs(tmp_path, monkeypatch):
    out = tmp_path / "fail"
    cfg = xp.parse_config(_write(tmp_path, BASE_CFG.format(out=out)))

    def boom(*a, **k):
        raise SolverFailure("injected", np.array([1.0]))

    monkeypatch.setattr(xp.fem, "fine_reference_solve", boom)
    with pytest.raises(SolverFailure):
        xp.run_experiment(cfg)
    assert not os.path.exists(out / "sweep.csv")


def test_workers_resolution(monkeypatch):
    monkeypatch.setenv("CEMMS_THREADS", "3")
    assert xp.resolve_workers(0) == 3
    assert xp.resolve_workers(5) == 5
    monkeypatch.delenv("CEMMS_THREADS")
    assert xp.resolve_workers(0) >= 1


# ---------------------------------------------------------------------------
# CLI

def test_cli_version(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert "cemms" in capsys.readouterr().out


def test_cli_run(tmp_path, capsys):
    out = tmp_path / "cli_out"
    cfg_path = _write(tmp_path, BASE_CFG.format(out=out))
    assert cli.main(["run", cfg_path]) == 0
    assert (out / "sweep.csv").exists()


def test_cli_config_error(tmp_path, capsys):
    assert cli.main(["run", str(tmp_path / "missing.cfg")]) == 2
    bad = _write(tmp_path, "problem = nope\n", name="bad.cfg")
    assert cli.main(["run", bad]) == 2


def test_cli_solver_failure_exit_code(tmp_path, monkeypatch):
    cfg_path = _write(tmp_path, BASE_CFG.format(out=tmp_path / "x"))

    def boom(cfg):
        raise SolverFailure("injected", np.array([1.0]))

    monkeypatch.setattr(cli, "run_experiment", boom)
    assert cli.main(["run", cfg_path]) == 3


def test_cli_synth_roundtrip(tmp_path):
    out = tmp_path / "mask.txt"
    assert cli.main(["synth", "style=boundary-channels,n=16,density=0.2,seed=7",
                     "-o", str(out)]) == 0
    geom = build_grids(4, 4, "dirichlet")
    field = media.load_field(out, geom, 1.0, 1e4)
    assert 0.15 <= field.phase_mask.mean() <= 0.3


def test_cli_synth_bad_spec(tmp_path):
    assert cli.main(["synth", "style=weird,n=16", "-o", str(tmp_path / "m.txt")]) == 2


def test_cli_no_command(capsys):
    assert cli.main([]) == 2


def test_cli_decay(tmp_path):
    out = tmp_path / "cli_decay"
    cfg_path = _write(tmp_path, BASE_CFG.format(out=out))
    assert cli.main(["decay", cfg_path]) == 0
    assert (out / "decay_profiles.csv").exists()
