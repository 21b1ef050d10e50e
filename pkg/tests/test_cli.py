import json

import numpy as np
import pytest

from topo3d.cli import make_run_dir, run_cli, timing_report
from topo3d.errors import ConfigError
from topo3d.geometry import parse_stl
from topo3d.mesh import build_mesh
from topo3d.optimizer import run_optimization
from topo3d.problem import ProblemDefinition, boundary_from_dict, default_cantilever

SMALL = ["--nelx", "8", "--nely", "4", "--nelz", "4", "--rmin", "1.5", "--volfrac", "0.3", "-q"]


class TestCantilever:
    def test_benchmark_dims(self):
        bc = default_cantilever((32, 16, 16))
        mesh = build_mesh(32, 16, 16)
        assert bc.fixed_dofs.size == 867
        n = mesh.node_id(32, 8, 0)
        assert dict(bc.loads) == {3 * n + 2: -1.0}

    def test_small_dims(self):
        assert default_cantilever((1, 2, 1)).fixed_dofs.size == 18

    @pytest.mark.parametrize("dims", [(1, 1, 1), (3, 5, 2), (2, 4, 7), (6, 1, 1)])
    def test_load_never_on_fixed_dof(self, dims):
        bc = default_cantilever(dims)
        assert len(bc.loads) == 1
        assert not set(bc.loads) & set(bc.fixed_dofs.tolist())

    def test_odd_nely_logs(self, caplog):
        caplog.set_level("INFO")
        bc = default_cantilever((2, 3, 1))
        n = build_mesh(2, 3, 1).node_id(2, 1, 0)
        assert list(bc.loads) == [3 * n + 2]
        assert "odd nely" in caplog.text


def test_boundary_json_reproduces_cantilever():
    mesh = build_mesh(6, 4, 2)
    data = {"fixed": [{"x": 0}], "loads": [{"node": [6, 2, 0], "force": [0, 0, -1]}]}
    bc = boundary_from_dict(data, mesh)
    ref = default_cantilever((6, 4, 2))
    np.testing.assert_array_equal(bc.fixed_dofs, ref.fixed_dofs)
    assert dict(bc.loads) == dict(ref.loads)


def test_boundary_json_partial_dofs_and_errors():
    mesh = build_mesh(2, 2, 2)
    bc = boundary_from_dict({"fixed": [{"x": 0, "y": [0, 1], "z": 0, "dofs": "z"}], "loads": []}, mesh)
    assert bc.fixed_dofs.tolist() == [3 * mesh.node_id(0, 0, 0) + 2, 3 * mesh.node_id(0, 1, 0) + 2]
    with pytest.raises(ConfigError):
        boundary_from_dict({"fixed": [{"x": [0, 3]}]}, mesh)
    with pytest.raises(ConfigError):
        boundary_from_dict({"fixed": []}, mesh)


def test_problem_validation(tmp_path):
    with pytest.raises(ConfigError):
        ProblemDefinition(nelx=0)
    with pytest.raises(ConfigError):
        ProblemDefinition(design_stl=str(tmp_path / "missing.stl"))
    with pytest.raises(ConfigError):
        ProblemDefinition(filter_mode="pde")


def test_run_dir_never_overwrites(tmp_path):
    dirs = {make_run_dir(tmp_path) for _ in range(3)}
    assert len(dirs) == 3 and all(d.is_dir() for d in dirs)


class TestRunCli:
    def test_bad_dimension_exit_2(self, tmp_path, capsys):
        assert run_cli(["--nelx", "0", "--out", str(tmp_path)]) == 2
        assert "nelx" in capsys.readouterr().err

    def test_unknown_flag_exit_2(self):
        assert run_cli(["--frobnicate"]) == 2

    def test_missing_obstacle_file_exit_2(self, tmp_path):
        assert run_cli(SMALL + ["--obstacle-config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2

    def test_small_run_writes_outputs(self, tmp_path, capsys):
        code = run_cli(SMALL + ["--max-iter", "15", "--out", str(tmp_path)])
        assert code == 0
        (run_dir,) = tmp_path.iterdir()
        assert capsys.readouterr().out.strip() == str(run_dir)
        lines = (run_dir / "trace.csv").read_text().splitlines()
        assert lines[0] == "iter,compliance,volume,change,t_assembly,t_solve,t_filter,t_update"
        summary = json.loads((run_dir / "summary.json").read_text())
        assert summary["iterations"] == len(lines) - 1
        report = json.loads((run_dir / "timing_report.json").read_text())
        assert [p["phase"] for p in report["phases"]] == ["Assembly", "Solve", "Filter", "Update"]
        assert sum(p["percent"] for p in report["phases"]) == pytest.approx(100, abs=0.1)
        assert len(parse_stl((run_dir / "result.stl").read_bytes())) > 0

    def test_runtime_error_exit_1(self, tmp_path):
        bc = tmp_path / "bc.json"
        bc.write_text(json.dumps({"fixed": [{"x": 0, "y": 0, "z": 0}], "loads": [{"node": [8, 2, 0], "force": [0, 0, -1]}]}))
        assert run_cli(SMALL + ["--bc-config", str(bc), "--out", str(tmp_path)]) == 1

    def test_config_file_precedence(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"nelx": 6, "nely": 2, "nelz": 2, "max_iter": 3, "rmin": 1.2, "volfrac": 0.5}))
        assert run_cli(["--config", str(cfg), "--max-iter", "2", "--out", str(tmp_path), "-q"]) == 0
        (run_dir,) = tmp_path.glob("run-*")
        summary = json.loads((run_dir / "summary.json").read_text())
        assert summary["iterations"] == 2
        assert summary["options"]["nelx"] == 6 and summary["options"]["volfrac"] == 0.5

    def test_bad_config_key_exit_2(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"nelxx": 6}))
        assert run_cli(["--config", str(cfg)]) == 2

    def test_deterministic_runs_are_identical(self, tmp_path):
        args = SMALL + ["--max-iter", "10", "--deterministic"]
        assert run_cli(args + ["--out", str(tmp_path / "a")]) == 0
        assert run_cli(args + ["--out", str(tmp_path / "b")]) == 0
        (a,), (b,) = (tmp_path / "a").iterdir(), (tmp_path / "b").iterdir()
        assert (a / "result.stl").read_bytes() == (b / "result.stl").read_bytes()
        strip = lambda p: [",".join(l.split(",")[:4]) for l in (p / "trace.csv").read_text().splitlines()]
        assert strip(a) == strip(b)

    def test_design_stl_domain(self, tmp_path):
        from test_geometry import box_mesh
        from topo3d.geometry import write_stl

        # L-shaped domain: full-length lower half plus the clamped half of the upper layer
        a, b = box_mesh([0, 0, 0], [8, 4, 2]), box_mesh([0, 0, 2], [4, 4, 4])
        stl = tmp_path / "domain.stl"
        stl.write_bytes(
            write_stl(np.concatenate([a.normals, b.normals]), np.concatenate([a.vertices, b.vertices]))
        )
        out = tmp_path / "out"
        assert run_cli(SMALL + ["--max-iter", "3", "--design-stl", str(stl), "--out", str(out)]) == 0
        (run_dir,) = out.iterdir()
        summary = json.loads((run_dir / "summary.json").read_text())
        assert summary["designable_elements"] == 8 * 4 * 2 + 4 * 4 * 2


def test_timing_report_sums():
    _, trace = run_optimization(ProblemDefinition(nelx=4, nely=2, nelz=2, rmin=1.5, max_iter=3))
    rep = timing_report(trace)
    assert sum(p["percent"] for p in rep["phases"]) == pytest.approx(100, abs=0.1)
    assert rep["total_seconds"] <= rep["loop_seconds"] * 1.05
