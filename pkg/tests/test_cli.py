import csv

import numpy as np
import pytest

from iphosm.cli import main
from iphosm.mesh import generate_structured_mesh, save_mesh


def test_osm_tau_const(capsys):
    assert main(["osm", "--nx", "16", "--boxes", "2x2", "--gamma-rule", "tau_const", "--tol", "1e-8"]) == 0
    assert "converged = True" in capsys.readouterr().out


def test_osm_check_and_history(tmp_path, capsys):
    out = tmp_path / "h.csv"
    assert main(["osm", "--nx", "8", "--check", "--tol", "1e-10", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    err = float(text.split("fixed_point_error = ")[1].split()[0])
    assert err < 1e-7
    assert out.read_text().splitlines()[0] == "iteration,R_norm,rho_local"


def test_osm_nonconvergence_exit_code():
    assert main(["osm", "--nx", "8", "--maxit", "3"]) == 2


def test_bad_flag_exit_code(capsys):
    assert main(["osm", "--bogus"]) == 1
    assert "error" in capsys.readouterr().err


def test_missing_subcommand():
    assert main([]) == 1


def test_unreadable_mesh():
    assert main(["solve", "--mesh", "/nonexistent/mesh.txt"]) == 1


def test_bad_boxes():
    assert main(["solve", "--boxes", "0x2"]) == 1
    assert main(["solve", "--nx", "3", "--boxes", "2x1"]) == 1


def test_solve_sine(capsys):
    assert main(["solve", "--nx", "8", "--rhs", "sine", "--eta", "1"]) == 0
    out = capsys.readouterr().out
    assert float(out.split("l2_error = ")[1].split()[0]) < 0.05


def test_bench_eta_sweep_csv(tmp_path):
    out = tmp_path / "eta.csv"
    assert main(["bench", "--table", "eta-sweep", "--levels", "2", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 6
    assert sorted({r["label"] for r in rows}) == ["const", "h-1", "h-2"]


def test_spectra_from_mesh_file(tmp_path):
    mesh = generate_structured_mesh(4, 4)
    save_mesh(mesh, tmp_path / "m.txt")
    out = tmp_path / "schur.csv"
    assert main(["spectra", "--check", "schur", "--mesh", str(tmp_path / "m.txt"), "--boxes", "2x1",
                 "--out", str(out)]) == 0
    assert out.read_text().startswith("quantity,level,measured,bound,ratio,pass")


def test_spectra_tags_file(tmp_path):
    mesh = generate_structured_mesh(4, 4)
    tags = (mesh.centroids()[:, 0] > 0.5).astype(int)
    save_mesh(mesh, tmp_path / "m.txt", tags)
    assert main(["spectra", "--check", "b", "--mesh", str(tmp_path / "m.txt")]) == 0
    np.savetxt(tmp_path / "t.txt", tags, fmt="%d")
    assert main(["spectra", "--check", "b", "--mesh", str(tmp_path / "m.txt"), "--tags",
                 str(tmp_path / "t.txt")]) == 0


def test_spectra_all_levels(tmp_path):
    out = tmp_path / "all.csv"
    assert main(["spectra", "--check", "all", "--nx", "4", "--levels", "2", "--eta", "1",
                 "--samples", "20", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert all(r["pass"] == "1" for r in rows)


def test_config_file_cli_wins(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# manifest\nnx = 8\ngamma = 0.9\nmaxit = 3\n")
    assert main(["osm", "--config", str(cfg)]) == 2
    assert "gamma = 0.9" in capsys.readouterr().out
    assert main(["osm", "--config", str(cfg), "--maxit", "5000"]) == 0


def test_config_file_bad_line(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("nx 8\n")
    assert main(["osm", "--config", str(cfg)]) == 1


def test_parabolic(tmp_path):
    out = tmp_path / "p.csv"
    assert main(["parabolic", "--nx", "8", "--steps", "2", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 2 and int(rows[0]["iterations"]) >= 1


def test_parabolic_rule_mismatch():
    assert main(["parabolic", "--nx", "8", "--eta-rule", "const"]) == 1
