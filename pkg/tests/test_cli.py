import numpy as np
import pytest

from trafem.cli import ConfigError, load_config, main


def run_cli(*argv):
    return main(list(argv))


def test_load_config_defaults_and_overrides(tmp_path):
    cfg = load_config()
    assert cfg["problem"] == "poisson"
    assert cfg["dof_budget"] == 10_000
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nproblem = topo1\ntheta = 0.1\n")
    cfg = load_config(path)
    assert cfg["problem"] == "topo1"
    assert cfg["dof_budget"] == 150_000       # problem default kicks in
    assert cfg["theta"] == 0.1
    cfg = load_config(path, sets=["theta=0.2", "max_iter=7"])
    assert cfg["theta"] == 0.2 and cfg["max_iter"] == 7


def test_load_config_rejects_garbage(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("no_such_key = 1\n")
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text("just a line without equals\n")
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text("theta = not_a_number\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_run_synthetic(tmp_path):
    out = tmp_path / "out"
    code = run_cli("run", "--set", "problem=synthetic", "--out", str(out),
                   "--snapshot-stride", "1")
    assert code == 0
    history = (out / "history.csv").read_text().splitlines()
    assert history[0] == "k,dofs,F,psi,delta,rho,pred,cred,accepted,tau_val,tau_der,xi"
    assert len(history) > 1
    summary = (out / "summary.txt").read_text()
    for key in ("status", "iterations", "final_psi", "final_F", "final_dofs",
                "wall_time_s", "accepted_steps"):
        assert key in summary
    assert any(p.name.startswith("iter_") for p in out.iterdir())


def test_run_iteration_cap_exit_code(tmp_path):
    code = run_cli("run", "--set", "problem=synthetic", "--set", "max_iter=1",
                   "--set", "psi_tol=1e-30", "--out", str(tmp_path / "o"))
    assert code == 2


def test_run_malformed_config(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense == ?\n")
    assert run_cli("run", "--config", str(bad)) == 1
    assert run_cli("run", "--config", str(tmp_path / "missing.cfg")) == 1
    assert run_cli("run", "--set", "problem=unknown") == 1


def test_run_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run_cli("run", "--set", "problem=synthetic", "--set", "seed=3",
                       "--out", str(out)) == 0
    assert (a / "history.csv").read_bytes() == (b / "history.csv").read_bytes()


def test_check_gradient(capsys):
    assert run_cli("check-gradient", "--points", "2") == 0
    assert "PASS" in capsys.readouterr().out
    assert run_cli("check-gradient", "--points", "1", "--flip-sign") == 1
    assert run_cli("check-gradient", "--points", "0") == 1


def test_estimate_rates_single_level(capsys):
    assert run_cli("estimate-rates", "--levels", "1", "--degrees", "1") == 0
    out = capsys.readouterr().out
    assert "—" in out


def test_estimate_rates_values(capsys):
    assert run_cli("estimate-rates", "--levels", "3", "--degrees", "1") == 0
    out = capsys.readouterr().out
    assert "fitted rate" in out


def test_export_mesh(tmp_path):
    out = tmp_path / "mesh_out"
    assert run_cli("export-mesh", "--set", "problem=poisson",
                   "--out", str(out)) == 0
    text = (out / "mesh.vtk").read_text().splitlines()
    assert text[0].startswith("# vtk DataFile")
    npoints = int(text[4].split()[1])
    assert npoints == 65                     # 8x8 L-shape vertices
    assert "CELL_DATA 96" in "\n".join(text)


def test_vtk_writer_roundtrip(tmp_path):
    from trafem.mesh import CellField, create_rect_mesh
    from trafem.fem import build_space
    from trafem.vtk_io import write_vtk
    m = create_rect_mesh(2, 2)
    s = build_space(m, 2, dirichlet_tags=())
    u = s.interpolate(lambda x, y: x + y)
    path = tmp_path / "f.vtk"
    write_vtk(path, m, cell_data={"z": CellField.constant(m, 1.5)},
              point_data={"u": u})
    lines = path.read_text().splitlines()
    assert f"POINTS {m.num_vertices} double" in lines
    assert f"CELLS {m.num_cells} {4 * m.num_cells}" in lines
    assert "SCALARS z double 1" in lines
    assert "SCALARS u double 1" in lines
    # P2 vertex values are exact nodal values
    idx = lines.index("SCALARS u double 1") + 2
    vals = [float(v) for v in lines[idx:idx + m.num_vertices]]
    expect = m.vertices[:, 0] + m.vertices[:, 1]
    assert np.allclose(vals, expect)
