"""
Tests for the built-in template, disk and rectangle generators.
"""

import numpy as np
import pytest

from emshape.mesh import interface_rings, quality
from emshape.mesh_template import (AIR_ROTOR, COIL_BASE, MAGNET_BASE, DiskParams, MagnetCutout,
                                   RectangleParams, TemplateParams, generate_disk, generate_rectangle,
                                   generate_template)
from emshape.shared_utils import TemplateError


def test_eighth_sector_layout():
    """Default sector: one pole, one magnet with two pockets, six coils."""
    mesh = generate_template(TemplateParams())
    assert mesh.symmetry == "antiperiodic"
    assert mesh.n_nodes <= 3000
    assert MAGNET_BASE + 1 in mesh.region_table
    assert AIR_ROTOR in mesh.region_table
    coils = mesh.region_ids("coil")
    assert coils == [COIL_BASE + s for s in range(1, 7)]
    phases = [mesh.region_table[c].phase for c in coils]
    assert sorted(set(phases)) == ["A", "B", "C"]
    assert np.count_nonzero(mesh.triangle_mask("air_rotor")) > 0
    assert quality(mesh).inverted_count == 0


def test_quarter_sector_is_periodic():
    mesh = generate_template(TemplateParams(sector="quarter", h=0.004))
    assert mesh.symmetry == "periodic"
    assert len(mesh.region_ids("magnet")) == 2


def test_full_machine_has_no_periodic_sides():
    mesh = generate_template(TemplateParams(poles=2, sector="full", slots_per_pole=0, h=0.004,
                                            interface_vertices=32))
    assert "periodic_a" not in mesh.boundary_table.values()
    assert interface_rings(mesh).count == 32


@pytest.mark.parametrize("steps", [8, 15])
def test_interface_count_fits_the_step_grid(steps):
    mesh = generate_template(TemplateParams(h=0.004, steps_per_period=steps))
    assert interface_rings(mesh).count % steps == 0


def test_interface_count_must_divide():
    with pytest.raises(TemplateError, match="interface count not divisible"):
        generate_template(TemplateParams(interface_vertices=30, steps_per_period=8))


def test_radii_out_of_order():
    with pytest.raises(TemplateError, match="radii out of order"):
        generate_template(TemplateParams(r_rotor=0.052, r_stator_inner=0.051))


def test_overlapping_cutouts():
    magnet = MagnetCutout()
    with pytest.raises(TemplateError, match="overlapping cutouts"):
        generate_template(TemplateParams(magnets=[magnet, magnet]))


def test_sector_must_divide_the_poles():
    with pytest.raises(TemplateError):
        generate_template(TemplateParams(poles=2, sector="quarter"))


def test_disk_size_and_regions():
    mesh = generate_disk(DiskParams())
    assert 200 <= mesh.n_nodes <= 800
    kinds = sorted(role.kind for role in mesh.region_table.values())
    assert kinds == ["air_stator", "coil", "coil", "iron_rotor", "magnet"]
    assert interface_rings(mesh) is None
    assert mesh.boundary_nodes("outer").size == DiskParams().n_theta


def test_disk_winding_halves_carry_opposite_current():
    mesh = generate_disk(DiskParams())
    coils = {rid: role for rid, role in mesh.region_table.items() if role.kind == "coil"}
    assert sorted(role.polarity for role in coils.values()) == [-1, 1]
    centroid_x = mesh.nodes[mesh.triangles][:, :, 0].mean(axis=1)
    for rid, role in coils.items():
        side = centroid_x[mesh.tri_region == rid]
        assert np.all(side > 0.0) if role.polarity > 0 else np.all(side < 0.0)
    counts = [np.count_nonzero(mesh.tri_region == rid) for rid in coils]
    assert counts[0] == counts[1]


def test_disk_radii_out_of_order():
    with pytest.raises(TemplateError):
        generate_disk(DiskParams(r_magnet=0.04))


def test_rectangle_counts_and_split():
    params = RectangleParams(nx=4, ny=3, lx=2.0, ly=1.0, left_role="iron_rotor", right_role="magnet 1")
    mesh = generate_rectangle(params)
    assert mesh.n_nodes == 5 * 4
    assert mesh.n_triangles == 2 * 4 * 3
    assert mesh.boundary_nodes("outer").size == 2 * (4 + 3)
    assert np.count_nonzero(mesh.tri_region == 2) == 2 * 2 * 3
    assert mesh.signed_areas().sum() == pytest.approx(2.0)
