"""
Tests for eddy-current density, power, Arkkio torque and the cost breakdown.
"""

import numpy as np
import pytest

from emshape.assembly import element_geometry
from emshape.materials import NU0, DriveSpec, MaterialsSpec, build_material_table
from emshape.mesh_template import TemplateParams, generate_template
from emshape.quantities import (TorqueAnnulus, average_torque, conducting_groups, cost, eddy_density,
                                power_step, power_step_grad, step_table, torque_annulus, torque_step,
                                torque_step_grad, torque_weight)
from emshape.run_config import CostSpec, FlagsSpec, SolverSettings
from emshape.shared_utils import ConfigError
from emshape.state import solve_trajectory

TIGHT = SolverSettings(newton_tol=1e-12, linear_tol=1e-12)


def annulus(V):
    return generate_template(TemplateParams(poles=2, sector="full", slots_per_pole=0, magnets=[],
                                            h=0.004, interface_vertices=V, steps_per_period=8))


def energy_scale(mesh, ann, u):
    """kappa * sum over the annulus of area * r * |grad u|^2."""
    geo = element_geometry(mesh)
    g = geo.gradient_of(mesh, u)[ann.triangles]
    r = np.hypot(*mesh.nodes[mesh.triangles[ann.triangles]].mean(axis=1).T)
    return ann.kappa * float(np.sum(geo.area[ann.triangles] * r * np.einsum("ei,ei->e", g, g)))


class TestEddyCurrents:
    @pytest.mark.parametrize("per_component", [True, False])
    def test_zero_mean_on_every_step(self, eighth_template, template_drive, factor_cache, per_component):
        materials = build_material_table(eighth_template, MaterialsSpec(iron_model="linear"))
        traj = solve_trajectory(eighth_template, materials, template_drive, TIGHT, cache=factor_cache)
        geo = element_geometry(eighth_template)
        for j in range(1, traj.n_steps + 1):
            field = eddy_density(traj.u[j], traj.u[j - 1], eighth_template, materials, traj.tau,
                                 per_component, geo)
            for tris in field.components:
                total = np.sum(geo.area[tris] * np.abs(field.J[tris]))
                assert total > 0.0
                assert abs(np.sum(geo.area[tris] * field.J_tilde[tris])) <= 1e-10 * total

    def test_groups_merge_without_per_component_mean(self, full_annulus):
        assert len(conducting_groups(full_annulus, True)) == 2
        merged = conducting_groups(full_annulus, False)
        assert len(merged) == 1
        assert merged[0].size == np.count_nonzero(full_annulus.triangle_mask("magnet"))

    def test_constant_shift_has_no_eddy_current(self, disk_mesh, linear_disk_spec):
        materials = build_material_table(disk_mesh, linear_disk_spec)
        u = np.random.default_rng(5).standard_normal(disk_mesh.n_nodes)
        field = eddy_density(u + 3.0, u, disk_mesh, materials, 1e-3)
        np.testing.assert_allclose(field.J_tilde, 0.0, atol=1e-9 * np.abs(field.J).max())


class TestPower:
    def test_power_gradient_matches_finite_differences(self, disk_mesh, linear_disk_spec):
        materials = build_material_table(disk_mesh, linear_disk_spec)
        rng = np.random.default_rng(6)
        u_prev, u_j = rng.standard_normal((2, disk_mesh.n_nodes)) * 1e-3
        d_prev, d_j = rng.standard_normal((2, disk_mesh.n_nodes))
        tau, lz = 1e-3, 0.1
        assert power_step(u_prev, u_j, disk_mesh, materials, tau, lz) > 0.0
        g_j, g_prev = power_step_grad(u_prev, u_j, disk_mesh, materials, tau, lz)
        h = 1e-4
        fd = (power_step(u_prev + h * d_prev, u_j + h * d_j, disk_mesh, materials, tau, lz)
              - power_step(u_prev - h * d_prev, u_j - h * d_j, disk_mesh, materials, tau, lz)) / (2 * h)
        assert g_j @ d_j + g_prev @ d_prev == pytest.approx(fd, rel=1e-6)
        np.testing.assert_allclose(g_prev, -g_j)


class TestTorque:
    def test_annulus_radii_from_the_airgap(self, full_annulus):
        ann = torque_annulus(full_annulus, CostSpec())
        assert ann.r_rotor == pytest.approx(0.050)
        assert ann.r_stator == pytest.approx(0.051)
        configured = torque_annulus(full_annulus, CostSpec(r_rotor=0.0501, r_stator=0.0509))
        assert configured.kappa > ann.kappa

    def test_disk_has_no_annulus(self, disk_mesh):
        with pytest.raises(ConfigError, match="annulus is empty"):
            torque_annulus(disk_mesh, CostSpec())

    def test_radially_symmetric_field_has_no_torque(self):
        mesh = annulus(32)
        ann = torque_annulus(mesh, CostSpec())
        u = np.hypot(mesh.nodes[:, 0], mesh.nodes[:, 1]) ** 2
        T = torque_step(u, mesh, ann)
        assert abs(T) <= 1e-3 * energy_scale(mesh, ann, u)

    @pytest.mark.parametrize("V", [32, 64])
    def test_uniform_gradient_has_no_torque(self, V):
        mesh = annulus(V)
        ann = torque_annulus(mesh, CostSpec())
        u = mesh.nodes[:, 0].copy()
        assert abs(torque_step(u, mesh, ann)) <= 1e-3 * energy_scale(mesh, ann, u)

    def test_two_harmonic_field_matches_the_closed_form(self):
        """u = x + r0^2 y / r^2 gives T = -2 pi r0^2 nu0 l_z on every annulus around the origin."""
        mesh = annulus(128)
        r0 = 0.0505
        x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
        u = x + r0 ** 2 * y / (x * x + y * y)
        exact = -2.0 * np.pi * r0 ** 2 * NU0 * CostSpec().axial_length
        whole = torque_step(u, mesh, torque_annulus(mesh, CostSpec()))
        assert whole == pytest.approx(exact, rel=2e-2)
        for role in ("airgap_rotor", "airgap_stator"):
            tris = np.flatnonzero(mesh.triangle_mask(role))
            radii = np.hypot(*mesh.nodes[np.unique(mesh.triangles[tris])].T)
            layer = TorqueAnnulus(tris, float(radii.min()), float(radii.max()), CostSpec().axial_length)
            assert torque_step(u, mesh, layer) == pytest.approx(whole, rel=2e-2)

    def test_torque_gradient_matches_finite_differences(self, eighth_template):
        ann = torque_annulus(eighth_template, CostSpec())
        rng = np.random.default_rng(7)
        u = rng.standard_normal(eighth_template.n_nodes) * 1e-2
        d = rng.standard_normal(eighth_template.n_nodes)
        h = 1e-6
        fd = (torque_step(u + h * d, eighth_template, ann)
              - torque_step(u - h * d, eighth_template, ann)) / (2 * h)
        grad = torque_step_grad(u, eighth_template, ann)
        assert grad @ d == pytest.approx(fd, rel=1e-6)

    def test_average_and_literal_sum(self):
        steps = np.array([1.0, 2.0, 3.0, 6.0])
        assert torque_weight(4) == 0.25
        assert average_torque(steps) == pytest.approx(3.0)
        assert average_torque(steps, paper_literal_torque_sum=True) == pytest.approx(12.0)


class TestCost:
    def test_breakdown_and_step_table(self, eighth_template, template_drive, factor_cache):
        materials = build_material_table(eighth_template, MaterialsSpec(iron_model="linear"))
        traj = solve_trajectory(eighth_template, materials, template_drive, TIGHT, cache=factor_cache)
        spec = CostSpec(lambda1=1e5, lambda2=1e-4)
        b = cost(traj, eighth_template, materials, spec)
        assert b.power == pytest.approx(np.mean(b.power_steps))
        assert b.torque == pytest.approx(np.mean(b.torque_steps))
        assert b.J == pytest.approx(1e5 * b.power - 1e-4 * b.torque)
        assert np.all(b.power_steps >= 0.0)
        frame = step_table(b)
        assert list(frame.columns) == ["j", "P_j", "T_j"]
        assert frame["j"].tolist() == list(range(1, 9))

        literal = cost(traj, eighth_template, materials, spec, FlagsSpec(paper_literal_torque_sum=True))
        assert literal.torque == pytest.approx(8 * b.torque)

    def test_disk_cost_has_no_torque(self, disk_mesh, linear_disk_spec, disk_drive, factor_cache):
        materials = build_material_table(disk_mesh, linear_disk_spec)
        traj = solve_trajectory(disk_mesh, materials, disk_drive, TIGHT, cache=factor_cache)
        b = cost(traj, disk_mesh, materials, CostSpec(lambda1=1.0))
        assert np.all(b.torque_steps == 0.0)
        assert b.power > 0.0
        assert b.J == b.power

    def test_no_coils_and_no_rotation_means_no_loss(self, rectangle_mesh, factor_cache):
        materials = build_material_table(rectangle_mesh, MaterialsSpec())
        drive = DriveSpec(steps_per_period=4)
        traj = solve_trajectory(rectangle_mesh, materials, drive, cache=factor_cache)
        b = cost(traj, rectangle_mesh, materials, CostSpec())
        assert b.power == 0.0 and b.torque == 0.0
