"""
Tests for the command-line surface: exit codes, output files and the manifest.
"""

import hashlib

import pandas as pd
import pytest

from emshape import cli
from emshape.__main__ import main
from emshape.cli import build_parser, mesh_summary
from emshape.mesh import load_mesh, write_mesh
from emshape.mesh_template import DiskParams, generate_disk
from emshape.shapeopt import evaluate, gradient
from emshape.shared_utils import SolverError

DISK_RUN = """
[mesh.disk]
n_theta = 12
h = 0.004

[materials]
iron_model = "linear"
magnet_angle = 0.0
magnet_br = 0.0

[drive]
steps_per_period = 4

[cost]
lambda1 = 1.0

[solver]
newton_tol = 1e-12
linear_tol = 1e-12

[gradcheck]
eps_factor = 1e-4
"""

EMPTY_RECTANGLE_RUN = """
[mesh.rectangle]
nx = 4
ny = 4

[drive]
steps_per_period = 3
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def write_config(directory, text, name="run.toml"):
    path = directory / name
    path.write_text(text)
    return path


class TestSolve:
    def test_writes_steps_and_manifest(self, workdir, capsys):
        config = write_config(workdir, DISK_RUN)
        assert main(["solve", str(config), "--out", "out"]) == 0
        steps = pd.read_csv(workdir / "out" / "steps.csv")
        assert list(steps.columns) == ["j", "P_j", "T_j"]
        assert steps["j"].tolist() == [1, 2, 3, 4]
        assert (steps["P_j"] > 0.0).all()
        manifest = (workdir / "out" / "manifest.txt").read_text()
        assert "command: solve\n" in manifest
        assert f"config_sha256: {hashlib.sha256(config.read_bytes()).hexdigest()}\n" in manifest
        assert "numpy: " in manifest
        assert "P:" in capsys.readouterr().out

    def test_default_output_directory(self, workdir):
        config = write_config(workdir, DISK_RUN + '\n[output]\ndirectory = "from_config"\n')
        assert main(["solve", str(config)]) == 0
        assert (workdir / "from_config" / "steps.csv").exists()

    def test_environment_wins_over_flag(self, workdir, monkeypatch):
        monkeypatch.setenv("EMSHAPE_OUT", str(workdir / "from_env"))
        config = write_config(workdir, DISK_RUN)
        assert main(["solve", str(config), "--out", "from_flag"]) == 0
        assert (workdir / "from_env" / "steps.csv").exists()
        assert not (workdir / "from_flag").exists()

    def test_zero_source_gives_zero_losses(self, workdir):
        config = write_config(workdir, EMPTY_RECTANGLE_RUN)
        assert main(["solve", str(config), "--out", "out"]) == 0
        steps = pd.read_csv(workdir / "out" / "steps.csv")
        assert len(steps) == 3
        assert (steps[["P_j", "T_j"]] == 0.0).all().all()

    def test_reruns_are_byte_identical(self, workdir):
        config = write_config(workdir, DISK_RUN)
        assert main(["solve", str(config), "--out", "a"]) == 0
        assert main(["solve", str(config), "--out", "b"]) == 0
        assert (workdir / "a" / "steps.csv").read_bytes() == (workdir / "b" / "steps.csv").read_bytes()
        assert (workdir / "a" / "manifest.txt").read_text() == (workdir / "b" / "manifest.txt").read_text()

    def test_field_dumps(self, workdir):
        config = write_config(workdir, DISK_RUN + "\n[output]\ndump_fields = true\ndump_adjoint = true\n")
        assert main(["solve", str(config), "--out", "out"]) == 0
        lines = (workdir / "out" / "field_0001.vtk").read_text().splitlines()
        assert lines[0] == "# vtk DataFile Version 3.0"
        assert lines[2:4] == ["ASCII", "DATASET UNSTRUCTURED_GRID"]
        assert lines[4].startswith("POINTS ") and lines[4].endswith(" double")
        assert "SCALARS J_tilde double 1" in lines
        assert (workdir / "out" / "field_0000.vtk").exists()
        assert (workdir / "out" / "adjoint_0004.vtk").exists()


class TestFailures:
    def test_missing_mesh_is_an_input_error(self, workdir, capsys):
        config = write_config(workdir, '[mesh]\npath = "missing.emsh"\n')
        assert main(["solve", str(config), "--out", "out"]) == 2
        assert not (workdir / "out").exists()
        assert "Error in solve" in capsys.readouterr().out

    def test_unknown_key_is_an_input_error(self, workdir):
        config = write_config(workdir, DISK_RUN + "\n[shapeopt]\nlearning_rate = 0.1\n")
        assert main(["solve", str(config), "--out", "out"]) == 2

    def test_pole_mismatch(self, workdir):
        config = write_config(workdir, "[mesh.template]\npoles = 8\n\n[drive]\npole_pairs = 3\n")
        assert main(["solve", str(config), "--out", "out"]) == 2

    def test_missing_config_file(self, workdir):
        assert main(["solve", str(workdir / "nope.toml")]) == 2

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["train"])


class TestAdjointCheck:
    def test_passing_gate(self, workdir):
        config = write_config(workdir, DISK_RUN)
        assert main(["adjoint-check", str(config), "--samples", "2", "--out", "out"]) == 0
        table = pd.read_csv(workdir / "out" / "gradcheck.csv")
        assert list(table.columns) == ["node", "coord", "analytic", "fd", "rel_err"]
        assert len(table) == 4
        assert set(table["coord"]) == {0, 1}

    def test_zero_gate_always_fails(self, workdir):
        config = write_config(workdir, DISK_RUN)
        assert main(["adjoint-check", str(config), "--samples", "1", "--gate", "0", "--out", "out"]) == 4
        assert (workdir / "out" / "gradcheck.csv").exists()

    def test_reruns_are_byte_identical(self, workdir):
        config = write_config(workdir, DISK_RUN)
        assert main(["adjoint-check", str(config), "--samples", "2", "--out", "a"]) == 0
        assert main(["adjoint-check", str(config), "--samples", "2", "--out", "b"]) == 0
        assert (workdir / "a" / "gradcheck.csv").read_bytes() == (workdir / "b" / "gradcheck.csv").read_bytes()


class TestOptimize:
    def test_zero_iterations(self, workdir):
        config = write_config(workdir, DISK_RUN + "\n[shapeopt]\nmax_iters = 0\n")
        assert main(["optimize", str(config), "--out", "out"]) == 0
        history = pd.read_csv(workdir / "out" / "history.csv")
        assert list(history.columns) == ["iter", "J", "P", "T", "step", "min_quality", "grad_norm"]
        assert len(history) == 1
        initial = load_mesh(workdir / "out" / "mesh_initial.emsh")
        final = load_mesh(workdir / "out" / "mesh_final.emsh")
        assert initial.n_nodes == final.n_nodes
        assert "termination: max_iters\n" in (workdir / "out" / "manifest.txt").read_text()

    def test_reruns_are_byte_identical(self, workdir):
        config = write_config(workdir, DISK_RUN + "\n[shapeopt]\nmax_iters = 1\n")
        assert main(["optimize", str(config), "--out", "a"]) == 0
        assert main(["optimize", str(config), "--out", "b"]) == 0
        for name in ("history.csv", "mesh_final.emsh"):
            assert (workdir / "a" / name).read_bytes() == (workdir / "b" / name).read_bytes()
        assert len(pd.read_csv(workdir / "a" / "history.csv")) == 2

    def test_iteration_dumps(self, workdir):
        text = DISK_RUN + "\n[shapeopt]\nmax_iters = 1\n\n[output]\ndump_iterations = true\n"
        config = write_config(workdir, text)
        assert main(["optimize", str(config), "--out", "out"]) == 0
        assert (workdir / "out" / "iter_0000.vtk").exists()
        assert (workdir / "out" / "iter_0001.vtk").exists()
        assert "SCALARS grad_x double 1" in (workdir / "out" / "iter_0001.vtk").read_text()

    def test_failed_run_leaves_no_output(self, workdir, monkeypatch):
        def failing_optimize(mesh, problem, callback=None):
            evaluation = evaluate(mesh, problem)
            callback(0, evaluation, gradient(evaluation, problem))
            raise SolverError("line search solve failed").with_iteration(0)

        monkeypatch.setattr(cli, "optimize", failing_optimize)
        config = write_config(workdir, DISK_RUN + "\n[output]\ndump_iterations = true\n")
        assert main(["optimize", str(config), "--out", "out"]) == 3
        assert not (workdir / "out").exists()


class TestMeshInfo:
    def test_summary_of_a_written_mesh(self, workdir, capsys):
        mesh = generate_disk(DiskParams(n_theta=12, h=0.004))
        path = workdir / "disk.emsh"
        write_mesh(mesh, path)
        assert main(["mesh-info", str(path)]) == 0
        out = capsys.readouterr().out
        assert f"nodes: {mesh.n_nodes}" in out
        summary = mesh_summary(path)
        assert summary["triangles"] == mesh.n_triangles
        assert summary["interface_vertices"] == 0
        assert summary["inverted_count"] == 0
        assert sum(summary["regions"].values()) == mesh.n_triangles

    def test_malformed_mesh(self, workdir, capsys):
        path = workdir / "bad.emsh"
        path.write_text("emsh 1\nnodes 2\n0 0\n")
        assert main(["mesh-info", str(path)]) == 2
        assert "line" in capsys.readouterr().out
