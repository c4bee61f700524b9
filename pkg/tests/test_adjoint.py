"""
Tests for the backward adjoint sweep.

The adjoint identity dJ/dI = -sum_j v_j . dF_j/dI is checked against the
drive current, which enters the load linearly.
"""

import numpy as np
import pytest

from emshape.adjoint import initial_adjoint, power_rhs, solve_adjoint
from emshape.assembly import assemble_load, assemble_mass_sigma
from emshape.materials import DriveSpec, MaterialsSpec, build_material_table
from emshape.mesh import magnet_components
from emshape.mesh_template import TemplateParams, generate_template
from emshape.quantities import cost
from emshape.run_config import CostSpec, FlagsSpec, SolverSettings
from emshape.state import solve_trajectory

TIGHT = SolverSettings(newton_tol=1e-12, linear_tol=1e-12)
POWER = CostSpec(lambda1=1.0, lambda2=0.0)


def cost_at(mesh, materials, drive, current, cache):
    drive = drive.model_copy(update={"current_peak": current})
    traj = solve_trajectory(mesh, materials, drive, TIGHT, cache=cache)
    return traj, cost(traj, mesh, materials, POWER).J


def adjoint_current_derivative(mesh, materials, drive, traj, adj):
    """-sum_j v_j . dF_j/dI, using that F_j is affine in the current."""
    I = drive.current_peak
    zero = drive.model_copy(update={"current_peak": 0.0})
    total = 0.0
    for j, v in enumerate(adj.v):
        if v is None:
            continue
        dF = (assemble_load(mesh, materials, drive, j) - assemble_load(mesh, materials, zero, j)) / I
        total -= float(v @ dF)
    return total


def test_linear_sweep_reproduces_the_quadratic_current_law(disk_mesh, linear_disk_spec, disk_drive,
                                                           factor_cache):
    """With linear iron the loss is quadratic in the current, so dJ/dI = 2J/I."""
    materials = build_material_table(disk_mesh, linear_disk_spec)
    traj, J = cost_at(disk_mesh, materials, disk_drive, disk_drive.current_peak, factor_cache)
    assert J > 0.0
    adj = solve_adjoint(traj, disk_mesh, materials, POWER, settings=TIGHT, cache=factor_cache)
    assert adj.has_initial
    dJ = adjoint_current_derivative(disk_mesh, materials, disk_drive, traj, adj)
    assert dJ == pytest.approx(2.0 * J / disk_drive.current_peak, rel=1e-7)


def test_brauer_sweep_matches_finite_differences(disk_mesh, brauer_disk_spec, disk_drive, factor_cache):
    materials = build_material_table(disk_mesh, brauer_disk_spec)
    I = disk_drive.current_peak
    traj, _ = cost_at(disk_mesh, materials, disk_drive, I, factor_cache)
    adj = solve_adjoint(traj, disk_mesh, materials, POWER, settings=TIGHT, cache=factor_cache)
    dJ = adjoint_current_derivative(disk_mesh, materials, disk_drive, traj, adj)
    h = 1e-3 * I
    _, J_plus = cost_at(disk_mesh, materials, disk_drive, I + h, factor_cache)
    _, J_minus = cost_at(disk_mesh, materials, disk_drive, I - h, factor_cache)
    assert dJ == pytest.approx((J_plus - J_minus) / (2 * h), rel=1e-5)


def test_initial_adjoint_can_be_switched_off(disk_mesh, linear_disk_spec, disk_drive, factor_cache):
    materials = build_material_table(disk_mesh, linear_disk_spec)
    traj = solve_trajectory(disk_mesh, materials, disk_drive, TIGHT, cache=factor_cache)
    adj = solve_adjoint(traj, disk_mesh, materials, POWER, FlagsSpec(include_initial_adjoint=False),
                        TIGHT, factor_cache)
    assert not adj.has_initial
    assert all(v is not None for v in adj.v[1:])


def test_zero_initial_condition_has_no_initial_adjoint(disk_mesh, linear_disk_spec, disk_drive, factor_cache):
    materials = build_material_table(disk_mesh, linear_disk_spec)
    settings = SolverSettings(initial_condition="zero")
    traj = solve_trajectory(disk_mesh, materials, disk_drive, settings, cache=factor_cache)
    adj = solve_adjoint(traj, disk_mesh, materials, POWER, settings=settings, cache=factor_cache)
    assert not adj.has_initial
    mass = assemble_mass_sigma(disk_mesh, materials, traj.tau)
    with pytest.raises(ValueError, match="magnetostatic"):
        initial_adjoint(traj, adj.v[1], disk_mesh, materials, 1.0, 0.1, mass)


def test_power_rhs_step_range(disk_mesh, linear_disk_spec, disk_drive, factor_cache):
    materials = build_material_table(disk_mesh, linear_disk_spec)
    traj = solve_trajectory(disk_mesh, materials, disk_drive, TIGHT, cache=factor_cache)
    with pytest.raises(ValueError):
        power_rhs(0, traj, disk_mesh, materials, 1.0, 0.1)
    with pytest.raises(ValueError):
        power_rhs(disk_drive.steps_per_period + 1, traj, disk_mesh, materials, 1.0, 0.1)
    assert np.all(power_rhs(1, traj, disk_mesh, materials, 0.0, 0.1) == 0.0)


def test_adjoint_respects_dirichlet_nodes(disk_mesh, linear_disk_spec, disk_drive, factor_cache):
    materials = build_material_table(disk_mesh, linear_disk_spec)
    traj = solve_trajectory(disk_mesh, materials, disk_drive, TIGHT, cache=factor_cache)
    adj = solve_adjoint(traj, disk_mesh, materials, POWER, settings=TIGHT, cache=factor_cache)
    outer = disk_mesh.boundary_nodes("outer")
    for v in adj.v:
        assert np.all(v[outer] == 0.0)


@pytest.mark.parametrize("per_component", [True, False])
def test_power_rhs_is_blind_to_constants_on_the_magnets(factor_cache, per_component):
    mesh = generate_template(TemplateParams(sector="quarter", h=0.004, steps_per_period=8))
    materials = build_material_table(mesh, MaterialsSpec(iron_model="linear"))
    drive = DriveSpec(pole_pairs=4, steps_per_period=8)
    traj = solve_trajectory(mesh, materials, drive, TIGHT, cache=factor_cache)
    components = magnet_components(mesh)
    assert len(components) == 2
    groups = components if per_component else [np.concatenate(components)]
    for i in range(1, traj.n_steps + 1):
        rhs = power_rhs(i, traj, mesh, materials, 1.0, 0.1, per_component)
        assert np.abs(rhs).max() > 0.0
        for tris in groups:
            nodes = np.unique(mesh.triangles[tris])
            assert abs(rhs[nodes].sum()) <= 1e-12 * np.abs(rhs[nodes]).sum()
