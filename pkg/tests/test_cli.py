import numpy as np
import pytest

from lumpflow.cli import (
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_USAGE,
    build_model,
    export_fields,
    main,
    parse_config,
    provenance,
    read_fields_csv,
)
from lumpflow.errors import ConfigError
from lumpflow.mesh import build_geometry, dump_mesh, generate_structured_unit_square
from lumpflow.mesh import SimplicialMesh
from lumpflow.stepper import TimeState

MINIMAL = "[solver]\ntau = 0.1\n"

WELLS = """
[mesh]
n = 4
[sources]
mode = wells
initial_saturation = random
seed = 3
porosity = 0.2
[solver]
scheme = implicit
tau = 0.05
T = 0.1
[output]
fields = csv, vtk
cadence = 1
"""


def test_defaults_fill_in():
    cfg = parse_config(MINIMAL)
    assert cfg["solver.tau"] == 0.1
    assert cfg["solver.scheme"] == "semi_implicit"
    assert cfg["sources.bc"] == "dirichlet"
    assert cfg["sources.sampling"] == "pointwise"
    assert cfg["mesh.levels"] == (5, 10, 20, 40, 80)


def test_missing_tau_and_unknown_key_reported_together():
    with pytest.raises(ConfigError) as info:
        parse_config("[solver]\nscheme = implicit\nbogus = 1\n")
    msgs = info.value.problems
    assert "solver.tau required" in msgs
    assert "unknown key solver.bogus" in msgs


def test_value_errors():
    with pytest.raises(ConfigError, match="tau must be positive"):
        parse_config("[solver]\ntau = -1\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config(MINIMAL + "[extra]\nx = 1\n")
    with pytest.raises(ConfigError, match="dirichlet"):
        parse_config(MINIMAL + "[sources]\nmode = wells\nbc = dirichlet\n")
    with pytest.raises(ConfigError, match="solver.tau"):
        parse_config("[solver]\ntau = abc\n")


def test_overrides_and_digest():
    a = parse_config(MINIMAL)
    b = parse_config(MINIMAL, ["solver.T=2"])
    c = parse_config("# comment\n[solver]\ntau=0.1\nT = 1.0\n")
    assert b["solver.T"] == 2.0
    assert a.digest != b.digest
    assert a.digest == c.digest
    with pytest.raises(ConfigError):
        parse_config(MINIMAL, ["nonsense"])


def test_power_law_preset():
    cfg = parse_config(MINIMAL + "[model]\npreset = power_law\ntheta_w = 3\n")
    m = build_model(cfg)
    assert m.eta_w(0.5) == pytest.approx(0.5**3 / 3)


def test_export_round_trip_and_vtk(tmp_path):
    geom = build_geometry(generate_structured_unit_square(3))
    rng = np.random.default_rng(0)
    S, P = rng.uniform(size=geom.n_nodes), rng.normal(size=geom.n_nodes) * 1e3
    state = TimeState.from_arrays(geom, 2, 0.2, S, P, P + np.pi)
    export_fields(state, geom, tmp_path / "f.csv", "csv", ["hello"])
    back = read_fields_csv(tmp_path / "f.csv")
    np.testing.assert_array_equal(back["S"], S)
    np.testing.assert_array_equal(back["Pw"], P)
    np.testing.assert_array_equal(back["Po"], P + np.pi)
    np.testing.assert_array_equal(back["x"], geom.mesh.nodes[:, 0])
    export_fields(state, geom, tmp_path / "f.vtk", "vtk")
    lines = (tmp_path / "f.vtk").read_text().splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert lines[2:5] == ["ASCII", "DATASET UNSTRUCTURED_GRID", f"POINTS {geom.n_nodes} double"]
    assert f"CELLS {geom.mesh.n_elements} {4 * geom.mesh.n_elements}" in lines
    assert lines.count("5") == geom.mesh.n_elements
    assert "SCALARS Po double 1" in lines
    with pytest.raises(ValueError):
        export_fields(state, geom, tmp_path / "f.x", "xml")


def test_provenance_lines():
    cfg = parse_config(MINIMAL)
    head = provenance(cfg)
    assert head[0].startswith("lumpflow ")
    assert head[1] == f"config sha256:{cfg.digest}"


def test_run_command(tmp_path, capsys):
    cfgfile = tmp_path / "w.ini"
    cfgfile.write_text(WELLS)
    out = tmp_path / "out"
    assert main(["run", str(cfgfile), "--out", str(out)]) == EXIT_OK
    log = (out / "runlog.csv").read_text().splitlines()
    assert log[0].startswith("# lumpflow")
    assert log[2] == "step,t,min_S,max_S,mean_Pw,energy_acc,flux_imbalance,newton_iters"
    assert len(log) == 3 + 3
    names = sorted(p.name for p in out.iterdir())
    assert names == ["fields_00000.csv", "fields_00000.vtk", "fields_00001.csv", "fields_00001.vtk",
                     "fields_00002.csv", "fields_00002.vtk", "runlog.csv"]
    assert "completed 2 steps" in capsys.readouterr().out
    first = (out / "runlog.csv").read_text()
    assert main(["run", str(cfgfile), "--out", str(out)]) == EXIT_OK
    assert (out / "runlog.csv").read_text() == first


def test_run_missing_tau_is_usage_error(tmp_path, capsys):
    f = tmp_path / "bad.ini"
    f.write_text("[mesh]\nn = 4\n")
    assert main(["run", str(f)]) == EXIT_USAGE
    assert "solver.tau required" in capsys.readouterr().err


def test_mms_command_small(tmp_path, capsys):
    f = tmp_path / "m.ini"
    f.write_text("[mesh]\nlevels = 2, 4\n[solver]\ntau = 0.5\n")
    assert main(["mms", str(f), "--out", str(tmp_path)]) == EXIT_OK
    csv = (tmp_path / "convergence.csv").read_text().splitlines()
    assert csv[2] == "h,n_df,err_pw,rate_pw,err_s,rate_s"
    assert len(csv) == 5
    assert (tmp_path / "convergence.txt").exists()
    f.write_text("[mesh]\nlevels = 2, 4\n[sources]\nmode = wells\n[solver]\ntau = 0.5\n")
    assert main(["mms", str(f), "--out", str(tmp_path)]) == EXIT_USAGE


def test_check_mesh(tmp_path, capsys):
    assert main(["check-mesh", "--structured", "2"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "acute: yes" in out and "worst_angle: 1.5707963267948966" in out
    bad = SimplicialMesh([(0, 0), (1, 0), (0.5, 0.1)], [(0, 1, 2)], [0, 1, 2])
    f = tmp_path / "bad.mesh"
    f.write_text(dump_mesh(bad))
    assert main(["check-mesh", str(f)]) == EXIT_NUMERICAL
    assert "acute: no" in capsys.readouterr().out
    f.write_text("garbage\n")
    assert main(["check-mesh", str(f)]) == EXIT_USAGE
    assert main(["check-mesh", str(tmp_path / "missing.mesh")]) == EXIT_USAGE
    assert main(["check-mesh"]) == EXIT_USAGE


def test_identities_command(capsys):
    assert main(["identities", "--seed", "1", "--count", "2"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[-1].startswith("identities: PASS")
    import json

    rec = json.loads(lines[0])
    assert rec["ok"] is True and rec["seed"] == 1


def test_bad_arguments():
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE


def test_shipped_configs_parse():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for p in root.glob("*.ini"):
        parse_config(p.read_text())
