#!/usr/bin/env python3
"""
Tests for the MCP tool server.

Tools are called directly; FastMCP wraps decorated functions in tool
objects that keep the original callable on `.fn`.
"""

import pytest

pytest.importorskip("fastmcp")

from emshape import server  # noqa: E402
from emshape.mesh import write_mesh  # noqa: E402
from emshape.mesh_template import RectangleParams, generate_rectangle  # noqa: E402


def call(tool, *args, **kwargs):
    return getattr(tool, "fn", tool)(*args, **kwargs)


def test_server_name():
    assert server.settings["project"]["name"] == "emshape"


def test_server_info_reports_defaults_and_cache():
    info = call(server.get_server_info)
    assert info["project"]["name"] == "emshape"
    assert info["solver"]["newton_tol"] > 0.0
    assert set(info["cache_stats"]) == {"total_entries", "max_entries", "hits", "misses"}


def test_mesh_info_tool(tmp_path):
    path = tmp_path / "square.emsh"
    write_mesh(generate_rectangle(RectangleParams(nx=2, ny=2)), path)
    info = call(server.mesh_info, str(path))
    assert info["nodes"] == 9
    assert info["triangles"] == 8
    assert "error" not in info


def test_missing_mesh_returns_an_error_dict(tmp_path):
    info = call(server.mesh_info, str(tmp_path / "missing.emsh"))
    assert info["error_type"] == "input"
    assert info["operation"] == "mesh-info"
    assert info["error"].startswith("Error in mesh-info:")


def test_solve_tool(tmp_path):
    config = tmp_path / "run.toml"
    config.write_text("[mesh.rectangle]\nnx = 4\nny = 4\n\n[drive]\nsteps_per_period = 2\n")
    result = call(server.run_solve, str(config), str(tmp_path / "out"))
    assert result["command"] == "solve"
    assert result["steps"] == 2
    assert result["P"] == 0.0
    assert (tmp_path / "out" / "steps.csv").exists()


def test_invalid_config_returns_an_error_dict(tmp_path):
    config = tmp_path / "run.toml"
    config.write_text("[mesh\n")
    for tool in (server.run_solve, server.run_adjoint_check, server.run_optimize):
        result = call(tool, str(config))
        assert result["error_type"] == "input"
        assert "invalid TOML" in result["error"]
