"""
Shared fixtures: small meshes, material tables and drives.
"""

import sys
from pathlib import Path

import pytest

# Add src to path so we can import our modules
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from emshape.cache import FactorCache  # noqa: E402
from emshape.materials import DriveSpec, MaterialsSpec, build_material_table  # noqa: E402
from emshape.mesh_template import (DiskParams, RectangleParams, TemplateParams, generate_disk,  # noqa: E402
                                   generate_rectangle, generate_template)
from emshape.run_config import CostSpec, GradCheckSettings, SolverSettings  # noqa: E402
from emshape.shapeopt import ShapeProblem  # noqa: E402

TIGHT_SOLVER = SolverSettings(newton_tol=1e-12, linear_tol=1e-12)
ORACLE_CHECK = GradCheckSettings(eps_factor=1e-4)


@pytest.fixture(autouse=True)
def _isolated_output(monkeypatch):
    """Keep EMSHAPE_OUT from a developer shell out of the tests."""
    monkeypatch.delenv("EMSHAPE_OUT", raising=False)


@pytest.fixture
def disk_mesh():
    """Coarse polar disk, about 160 nodes."""
    return generate_disk(DiskParams(n_theta=12, h=0.004))


@pytest.fixture
def oracle_disk_mesh():
    """Default disk of the gradient oracle, between 200 and 800 nodes."""
    return generate_disk(DiskParams())


@pytest.fixture
def rectangle_mesh():
    return generate_rectangle(RectangleParams(nx=8, ny=8))


@pytest.fixture
def eighth_template():
    """One-pole antiperiodic sector with magnet, pockets and six slots."""
    return generate_template(TemplateParams(h=0.004, steps_per_period=8))


@pytest.fixture
def full_annulus():
    """Two-pole full machine with a slotless stator, V = 32."""
    return generate_template(TemplateParams(
        poles=2, sector="full", slots_per_pole=0, h=0.004,
        interface_vertices=32, steps_per_period=8))


@pytest.fixture
def linear_disk_spec():
    return MaterialsSpec(iron_model="linear", magnet_angle=0.0)


@pytest.fixture
def brauer_disk_spec():
    return MaterialsSpec(iron_model="brauer", magnet_angle=0.0)


@pytest.fixture
def coil_only_disk_spec():
    """Unmagnetized conducting core: the eddy currents come from the winding alone."""
    return MaterialsSpec(iron_model="linear", magnet_angle=0.0, magnet_br=0.0)


@pytest.fixture
def disk_drive():
    return DriveSpec(steps_per_period=4)


@pytest.fixture
def template_drive():
    return DriveSpec(pole_pairs=4, steps_per_period=8)


@pytest.fixture
def factor_cache():
    return FactorCache(max_entries=16)


@pytest.fixture
def disk_problem(disk_mesh, coil_only_disk_spec, disk_drive, factor_cache):
    """Linear disk, power cost only."""
    return ShapeProblem(build_material_table(disk_mesh, coil_only_disk_spec), disk_drive,
                        cost=CostSpec(lambda1=1.0, lambda2=0.0), solver=TIGHT_SOLVER,
                        gradcheck=ORACLE_CHECK, cache=factor_cache)
