"""
Built-in parametric meshes.

All generators work on a structured grid in a parameter plane ((r, theta) for
the machine and the disk, (x, y) for the rectangle) so that every cut-out is a
union of grid cells and the output is fully deterministic.
"""

import logging
import math
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .mesh import Mesh, RegionRole
from .shared_utils import TemplateError

logger = logging.getLogger(__name__)

SECTOR_DIVISORS = {"full": 1, "quarter": 4, "eighth": 8}

# region ids used by the machine template
IRON_ROTOR, AIR_ROTOR, AIRGAP_ROTOR, AIRGAP_STATOR, IRON_STATOR = 1, 2, 3, 4, 5
MAGNET_BASE, COIL_BASE = 10, 100
# boundary tags
SHAFT, OUTER, IFACE_ROTOR, IFACE_STATOR, PERIODIC_A, PERIODIC_B = 1, 2, 3, 4, 5, 6

BOUNDARY_TABLE = {
    SHAFT: "shaft", OUTER: "outer", IFACE_ROTOR: "interface_rotor",
    IFACE_STATOR: "interface_stator", PERIODIC_A: "periodic_a", PERIODIC_B: "periodic_b",
}


class MagnetCutout(BaseModel):
    """Magnet block plus air pockets on both angular ends, repeated on every pole.

    Angles are fractions of the pole pitch; radii in meters.
    """

    model_config = ConfigDict(extra="forbid")

    r_inner: float = 0.040
    r_outer: float = 0.044
    span_start: float = 0.2
    span_end: float = 0.8
    pocket_width: float = 0.08


class TemplateParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    poles: int = Field(8, ge=2)
    sector: Literal["full", "quarter", "eighth"] = "eighth"
    r_shaft: float = Field(0.020, gt=0.0)
    r_rotor: float = 0.050
    r_stator_inner: float = 0.051
    r_stator_outer: float = 0.080
    magnets: List[MagnetCutout] = Field(default_factory=lambda: [MagnetCutout()])
    slots_per_pole: int = Field(6, ge=0)
    slot_r_inner: float = 0.053
    slot_r_outer: float = 0.068
    slot_width: float = Field(0.5, gt=0.0, le=1.0)
    h: float = Field(0.002, gt=0.0)
    interface_vertices: Optional[int] = Field(None, ge=1)
    steps_per_period: int = Field(8, ge=1)

    @model_validator(mode="after")
    def _poles_even(self) -> "TemplateParams":
        if self.poles % 2:
            raise ValueError("poles (2p) must be even")
        return self

    @property
    def pole_pairs(self) -> int:
        return self.poles // 2


class DiskParams(BaseModel):
    """Polar disk: magnet core, rotor-iron ring, coil ring, air ring."""

    model_config = ConfigDict(extra="forbid")

    radius: float = 0.05
    r_magnet: float = 0.015
    r_iron: float = 0.030
    r_coil: float = 0.038
    n_theta: int = Field(24, ge=6)
    h: float = Field(0.002, gt=0.0)


class RectangleParams(BaseModel):
    """Structured rectangle split at x = split * lx into a left and right region."""

    model_config = ConfigDict(extra="forbid")

    nx: int = Field(8, ge=1)
    ny: int = Field(8, ge=1)
    lx: float = 1.0
    ly: float = 1.0
    left_role: str = "air_stator"
    right_role: Optional[str] = None
    split: float = Field(0.5, gt=0.0, lt=1.0)


def _radial_layers(breaks: List[float], dtheta: float, h: float) -> np.ndarray:
    """Radii of the grid rings; each band gets near-square cells."""
    radii = [breaks[0]]
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        target = max(0.5 * (lo + hi) * dtheta, 0.5 * h)
        n = max(1, int(round((hi - lo) / target)))
        radii.extend(np.linspace(lo, hi, n + 1)[1:].tolist())
    return np.array(radii)


def _ordered_breaks(values: List[float], what: str) -> List[float]:
    out = sorted(set(values))
    if out[0] != values[0] or out[-1] != values[-1]:
        raise TemplateError(f"{what} radii out of order")
    return out


def _snap(fraction: float, cells: int, what: str) -> int:
    exact = fraction * cells
    snapped = int(round(exact))
    if abs(snapped - exact) > 0.25:
        logger.warning(f"Template {what} snapped from {exact:.2f} to {snapped} grid cells")
    return snapped


def _interface_count(params: TemplateParams, sector_angle: float, r_interface: float,
                     poles_in_sector: int, slots_in_sector: int) -> int:
    N = params.steps_per_period
    base = math.lcm(N, poles_in_sector, max(slots_in_sector, 1))
    if params.interface_vertices is not None:
        V = params.interface_vertices
        if V % N:
            raise TemplateError(f"interface count not divisible: V = {V} by N = {N}")
        if V % base:
            raise TemplateError(
                f"interface count V = {V} must be a multiple of {base} "
                f"(poles and slots per sector)")
        return V
    wanted = max(1, math.ceil(sector_angle * r_interface / params.h))
    return base * math.ceil(wanted / base)


def _ring_nodes(radii: np.ndarray, angles: np.ndarray) -> np.ndarray:
    rr, tt = np.meshgrid(radii, angles, indexing="ij")
    return np.column_stack([(rr * np.cos(tt)).ravel(), (rr * np.sin(tt)).ravel()])


def _grid_cells(n_layers: int, n_cols: int, n_ang: int, wrap: bool, offset: int):
    """Two counterclockwise triangles per (layer, column) cell of a polar grid."""
    layer = np.arange(n_layers)[:, None]
    col = np.arange(n_cols)[None, :]
    nxt = (col + 1) % n_ang if wrap else col + 1
    a = offset + layer * n_ang + col
    b = offset + (layer + 1) * n_ang + col
    c = offset + (layer + 1) * n_ang + nxt
    d = offset + layer * n_ang + nxt
    first = np.stack([a, b, c], axis=-1).reshape(-1, 3)
    second = np.stack([a, c, d], axis=-1).reshape(-1, 3)
    # interleave so both halves of a cell are adjacent in the triangle list
    return np.stack([first, second], axis=1).reshape(-1, 3)


def _fix_orientation(nodes: np.ndarray, tris: np.ndarray) -> np.ndarray:
    p = nodes[tris]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    cw = (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]) < 0.0
    tris = tris.copy()
    tris[cw] = tris[cw][:, [0, 2, 1]]
    return tris


def _phase_belt(slot_in_pole: int, slots_per_pole: int, pole: int) -> Tuple[str, int]:
    q = slots_per_pole // 3
    belt = slot_in_pole // q
    phase, polarity = (("A", 1), ("C", -1), ("B", 1))[belt]
    if pole % 2:
        polarity = -polarity
    return phase, polarity


def generate_template(params: TemplateParams) -> Mesh:
    """
    Mapped triangulation of an IPM machine sector.

    The rotor and the stator are meshed separately and meet at duplicated,
    equispaced interface rings in the middle of the air gap.
    """
    divisor = SECTOR_DIVISORS[params.sector]
    if params.poles % divisor:
        raise TemplateError(f"{params.poles} poles cannot be cut into a {params.sector} sector")
    poles_in_sector = params.poles // divisor
    sector_angle = 2.0 * math.pi / divisor
    full = params.sector == "full"
    if params.slots_per_pole and params.slots_per_pole % 3:
        raise TemplateError("slots_per_pole must be a multiple of 3 (one belt per phase)")
    slots_in_sector = params.slots_per_pole * poles_in_sector

    if not (params.r_shaft < params.r_rotor < params.r_stator_inner < params.r_stator_outer):
        raise TemplateError("radii out of order: need shaft < rotor outer < stator inner < stator outer")
    r_interface = 0.5 * (params.r_rotor + params.r_stator_inner)

    for m in params.magnets:
        if not (params.r_shaft < m.r_inner < m.r_outer < params.r_rotor):
            raise TemplateError("magnet radii must lie strictly inside the rotor iron")
        if not (0.0 <= m.span_start - m.pocket_width and m.span_start < m.span_end
                and m.span_end + m.pocket_width <= 1.0):
            raise TemplateError("magnet and pockets must fit inside one pole pitch")
    for i, m1 in enumerate(params.magnets):
        for m2 in params.magnets[i + 1:]:
            radial = m1.r_inner < m2.r_outer and m2.r_inner < m1.r_outer
            angular = (m1.span_start - m1.pocket_width < m2.span_end + m2.pocket_width
                       and m2.span_start - m2.pocket_width < m1.span_end + m1.pocket_width)
            if radial and angular:
                raise TemplateError("overlapping cutouts")
    if params.slots_per_pole and not (
            params.r_stator_inner <= params.slot_r_inner < params.slot_r_outer < params.r_stator_outer):
        raise TemplateError("slot radii must lie inside the stator iron")

    V = _interface_count(params, sector_angle, r_interface, poles_in_sector, slots_in_sector)
    dtheta = sector_angle / V
    n_ang = V if full else V + 1
    angles = dtheta * np.arange(n_ang)

    rotor_breaks = [params.r_shaft]
    for m in params.magnets:
        rotor_breaks += [m.r_inner, m.r_outer]
    rotor_breaks += [params.r_rotor, r_interface]
    rotor_breaks = _ordered_breaks(rotor_breaks, "rotor")
    stator_breaks = [r_interface, params.r_stator_inner]
    if params.slots_per_pole:
        stator_breaks += [params.slot_r_inner, params.slot_r_outer]
    stator_breaks += [params.r_stator_outer]
    stator_breaks = _ordered_breaks(stator_breaks, "stator")

    r_rot = _radial_layers(rotor_breaks, dtheta, params.h)
    r_sta = _radial_layers(stator_breaks, dtheta, params.h)
    nodes = np.vstack([_ring_nodes(r_rot, angles), _ring_nodes(r_sta, angles)])
    stator_offset = r_rot.size * n_ang

    rot_tris = _grid_cells(r_rot.size - 1, V, n_ang, full, 0)
    sta_tris = _grid_cells(r_sta.size - 1, V, n_ang, full, stator_offset)

    # per-cell region ids, cells enumerated layer-major like _grid_cells
    cells_per_pole = V // poles_in_sector
    col = np.arange(V)
    pole_local = col // cells_per_pole
    col_in_pole = col % cells_per_pole
    rot_mid = 0.5 * (r_rot[:-1] + r_rot[1:])
    sta_mid = 0.5 * (r_sta[:-1] + r_sta[1:])

    region_table: Dict[int, RegionRole] = {
        IRON_ROTOR: RegionRole("iron_rotor"), AIR_ROTOR: RegionRole("air_rotor"),
        AIRGAP_ROTOR: RegionRole("airgap_rotor"), AIRGAP_STATOR: RegionRole("airgap_stator"),
        IRON_STATOR: RegionRole("iron_stator"),
    }

    rot_region = np.full((rot_mid.size, V), IRON_ROTOR, dtype=np.int64)
    rot_region[rot_mid > params.r_rotor, :] = AIRGAP_ROTOR
    for m in params.magnets:
        band = (rot_mid > m.r_inner) & (rot_mid < m.r_outer)
        c0 = _snap(m.span_start, cells_per_pole, "magnet start")
        c1 = _snap(m.span_end, cells_per_pole, "magnet end")
        p0 = _snap(m.span_start - m.pocket_width, cells_per_pole, "pocket start")
        p1 = _snap(m.span_end + m.pocket_width, cells_per_pole, "pocket end")
        if c1 <= c0:
            raise TemplateError("magnet span collapses on the angular grid")
        pocket = ((col_in_pole >= p0) & (col_in_pole < c0)) | ((col_in_pole >= c1) & (col_in_pole < p1))
        magnet = (col_in_pole >= c0) & (col_in_pole < c1)
        rot_region[np.ix_(band, pocket)] = AIR_ROTOR
        # one magnet region per pole; k counts poles from the machine's angle zero
        for pl in range(poles_in_sector):
            k = pl + 1
            rid = MAGNET_BASE + k
            region_table[rid] = RegionRole("magnet", index=k)
            rot_region[np.ix_(band, magnet & (pole_local == pl))] = rid

    sta_region = np.full((sta_mid.size, V), IRON_STATOR, dtype=np.int64)
    sta_region[sta_mid < params.r_stator_inner, :] = AIRGAP_STATOR
    if params.slots_per_pole:
        cells_per_slot = V // slots_in_sector
        band = (sta_mid > params.slot_r_inner) & (sta_mid < params.slot_r_outer)
        open_cells = max(1, _snap(params.slot_width, cells_per_slot, "slot width"))
        lead = (cells_per_slot - open_cells) // 2
        for s in range(slots_in_sector):
            pole = s // params.slots_per_pole
            phase, polarity = _phase_belt(s % params.slots_per_pole, params.slots_per_pole, pole)
            rid = COIL_BASE + s + 1
            region_table[rid] = RegionRole("coil", index=s + 1, phase=phase, polarity=polarity)
            first = s * cells_per_slot + lead
            sta_region[np.ix_(band, (col >= first) & (col < first + open_cells))] = rid

    triangles = np.vstack([rot_tris, sta_tris])
    tri_region = np.concatenate([np.repeat(rot_region.ravel(), 2), np.repeat(sta_region.ravel(), 2)])
    triangles = _fix_orientation(nodes, triangles)

    edges, tags = [], []

    def ring_edges(offset: int, layer: int, tag: int):
        start = offset + layer * n_ang
        for c in range(V):
            nxt = (c + 1) % n_ang if full else c + 1
            edges.append((start + c, start + nxt))
            tags.append(tag)

    ring_edges(0, 0, SHAFT)
    ring_edges(0, r_rot.size - 1, IFACE_ROTOR)
    ring_edges(stator_offset, 0, IFACE_STATOR)
    ring_edges(stator_offset, r_sta.size - 1, OUTER)
    if not full:
        for offset, n_layers in ((0, r_rot.size), (stator_offset, r_sta.size)):
            for layer in range(n_layers - 1):
                edges.append((offset + layer * n_ang, offset + (layer + 1) * n_ang))
                tags.append(PERIODIC_A)
                edges.append((offset + layer * n_ang + V, offset + (layer + 1) * n_ang + V))
                tags.append(PERIODIC_B)

    boundary_table = dict(BOUNDARY_TABLE)
    if full:
        del boundary_table[PERIODIC_A], boundary_table[PERIODIC_B]
    used_regions = set(np.unique(tri_region).tolist())
    region_table = {rid: role for rid, role in region_table.items() if rid in used_regions}
    symmetry = "antiperiodic" if (not full and poles_in_sector % 2) else "periodic"

    mesh = Mesh(nodes, triangles, tri_region, np.array(edges), np.array(tags),
                region_table, boundary_table, symmetry)
    mesh.validate()
    logger.info(
        f"Generated {params.sector} template: {mesh.n_nodes} nodes, {mesh.n_triangles} triangles, "
        f"V = {V}, symmetry {symmetry}")
    return mesh


def generate_disk(params: DiskParams) -> Mesh:
    """Disk with a conducting magnet core; used by the gradient oracle."""
    if not (0.0 < params.r_magnet < params.r_iron < params.r_coil < params.radius):
        raise TemplateError("disk radii out of order")
    n = params.n_theta
    dtheta = 2.0 * math.pi / n
    breaks = [0.0, params.r_magnet, params.r_iron, params.r_coil, params.radius]
    radii = [0.0]
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        layers = max(1, int(round((hi - lo) / params.h)))
        if lo == params.r_magnet:
            layers = max(layers, 3)
        radii.extend(np.linspace(lo, hi, layers + 1)[1:].tolist())
    radii = np.array(radii)

    angles = dtheta * np.arange(n)
    nodes = np.vstack([[0.0, 0.0], _ring_nodes(radii[1:], angles)])
    col = np.arange(n)
    fan = np.column_stack([np.zeros(n, dtype=np.int64), 1 + col, 1 + (col + 1) % n])
    rings = _grid_cells(radii.size - 2, n, n, True, 1)
    triangles = _fix_orientation(nodes, np.vstack([fan, rings]))

    MAGNET, IRON, COIL, RETURN, AIR = 10, 1, 100, 101, 5
    mid = 0.5 * (radii[:-1] + radii[1:])
    layer_region = np.where(mid < params.r_magnet, MAGNET,
                            np.where(mid < params.r_iron, IRON,
                                     np.where(mid < params.r_coil, COIL, AIR)))
    tri_region = np.concatenate([np.full(n, layer_region[0]), np.repeat(layer_region[1:], 2 * n)])
    # go and return halves of the winding drive a transverse field through the core
    centroid_x = nodes[triangles][:, :, 0].mean(axis=1)
    tri_region[(tri_region == COIL) & (centroid_x < 0.0)] = RETURN

    last = 1 + (radii.size - 2) * n
    edges = np.column_stack([last + col, last + (col + 1) % n])
    region_table = {
        MAGNET: RegionRole("magnet", index=1), IRON: RegionRole("iron_rotor"),
        COIL: RegionRole("coil", index=1, phase="A", polarity=1),
        RETURN: RegionRole("coil", index=2, phase="A", polarity=-1), AIR: RegionRole("air_stator"),
    }
    mesh = Mesh(nodes, triangles, tri_region, edges, np.full(n, OUTER), region_table, {OUTER: "outer"})
    mesh.validate()
    logger.info(f"Generated disk: {mesh.n_nodes} nodes, {mesh.n_triangles} triangles")
    return mesh


def generate_rectangle(params: RectangleParams) -> Mesh:
    """Uniform rectangle grid, Dirichlet on all four sides."""
    xs = np.linspace(0.0, params.lx, params.nx + 1)
    ys = np.linspace(0.0, params.ly, params.ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([xx.ravel(), yy.ravel()])

    def nid(i, j):
        return i * (params.ny + 1) + j

    i, j = np.meshgrid(np.arange(params.nx), np.arange(params.ny), indexing="ij")
    i, j = i.ravel(), j.ravel()
    a, b, c, d = nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1)
    triangles = np.stack([np.stack([a, b, c], -1), np.stack([a, c, d], -1)], axis=1).reshape(-1, 3)

    region_table = {1: RegionRole.parse(params.left_role.split())}
    tri_region = np.ones(len(triangles), dtype=np.int64)
    if params.right_role is not None:
        region_table[2] = RegionRole.parse(params.right_role.split())
        centroid_x = nodes[triangles][:, :, 0].mean(axis=1)
        tri_region[centroid_x > params.split * params.lx] = 2

    boundary = []
    for k in range(params.nx):
        boundary += [(nid(k, 0), nid(k + 1, 0)), (nid(k, params.ny), nid(k + 1, params.ny))]
    for k in range(params.ny):
        boundary += [(nid(0, k), nid(0, k + 1)), (nid(params.nx, k), nid(params.nx, k + 1))]
    mesh = Mesh(nodes, triangles, tri_region, np.array(boundary), np.full(len(boundary), OUTER),
                region_table, {OUTER: "outer"})
    mesh.validate()
    return mesh
