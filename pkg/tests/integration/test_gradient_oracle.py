"""
Finite-difference oracle for the adjoint shape gradient on the bundled disk and sector runs.
"""

from pathlib import Path

import pandas as pd
import pytest

from emshape.cli import run_adjoint_check

pytestmark = pytest.mark.slow

CONFIGS = Path(__file__).parent.parent.parent / "example_configs"


@pytest.mark.parametrize("name, gate", [
    ("disk_gradcheck.toml", 1e-5),
    ("disk_gradcheck_brauer.toml", 1e-4),
    ("template_torque_check.toml", 1e-5),
])
def test_adjoint_gradient_passes_the_gate(tmp_path, name, gate):
    result = run_adjoint_check(CONFIGS / name, out=tmp_path)
    assert result["gate"] == gate
    assert result["worst_rel_err"] < gate
    assert result["directions"] == 20
    assert result["inconclusive"] < result["directions"]
    table = pd.read_csv(tmp_path / "gradcheck.csv")
    assert (table["rel_err"] < gate).all() or result["inconclusive"] > 0


def test_gradient_check_is_reproducible(tmp_path):
    run_adjoint_check(CONFIGS / "disk_gradcheck.toml", samples=3, out=tmp_path / "a")
    run_adjoint_check(CONFIGS / "disk_gradcheck.toml", samples=3, out=tmp_path / "b")
    first = (tmp_path / "a" / "gradcheck.csv").read_bytes()
    assert first == (tmp_path / "b" / "gradcheck.csv").read_bytes()
