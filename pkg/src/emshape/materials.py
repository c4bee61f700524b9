"""
Constitutive data per region: reluctivity, conductivity, magnetization and
the three-phase coil source for every time step.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Literal, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .mesh import Mesh, interface_rings
from .shared_utils import ConfigError

logger = logging.getLogger(__name__)

NU0 = 1.0 / (4.0e-7 * math.pi)

PHASE_OFFSETS = {"A": 0.0, "B": -2.0 * math.pi / 3.0, "C": -4.0 * math.pi / 3.0}


class Reluctivity(NamedTuple):
    nu: np.ndarray
    dnu: np.ndarray
    clamped: int


@dataclass(frozen=True)
class ReluctivityModel:
    """nu(b^2) = nu for linear, k1*exp(k2*b^2) + k3 for brauer."""

    kind: Literal["linear", "brauer"] = "linear"
    nu: float = NU0
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    exp_cap: float = 50.0

    @classmethod
    def linear(cls, nu: float = NU0) -> "ReluctivityModel":
        return cls("linear", nu=nu)

    @classmethod
    def brauer(cls, k1: float, k2: float, k3: float, exp_cap: float = 50.0) -> "ReluctivityModel":
        return cls("brauer", k1=k1, k2=k2, k3=k3, exp_cap=exp_cap)


def reluctivity_eval(model: ReluctivityModel, b2) -> Reluctivity:
    """
    Reluctivity and its derivative with respect to b^2.

    Past the exponent cap the brauer curve is continued as a constant, so the
    returned derivative there is zero and stays consistent with the value.
    """
    b2 = np.asarray(b2, dtype=float)
    if np.any(b2 < 0.0):
        raise ValueError("b2 must be non-negative")
    if model.kind == "linear":
        return Reluctivity(np.full_like(b2, model.nu), np.zeros_like(b2), 0)
    arg = model.k2 * b2
    over = arg > model.exp_cap
    e = np.exp(np.minimum(arg, model.exp_cap))
    nu = model.k1 * e + model.k3
    dnu = np.where(over, 0.0, model.k1 * model.k2 * e)
    return Reluctivity(nu, dnu, int(np.count_nonzero(over)))


@dataclass(frozen=True)
class CoilSource:
    phase: str
    polarity: int
    turns: float
    slot_area: float


@dataclass(frozen=True)
class RegionMaterial:
    kind: str
    reluctivity: ReluctivityModel
    sigma: float = 0.0
    magnetization: Tuple[float, float] = (0.0, 0.0)
    source: Optional[CoilSource] = None


class MaterialsSpec(BaseModel):
    """`[materials]` section of a run file."""

    model_config = ConfigDict(extra="forbid")

    iron_model: Literal["linear", "brauer"] = "brauer"
    iron_mu_r: float = Field(1000.0, gt=0.0)
    brauer_k1: float = Field(3.8, ge=0.0)
    brauer_k2: float = Field(2.17, ge=0.0)
    brauer_k3: float = Field(396.2, gt=0.0)
    exp_cap: float = Field(50.0, gt=0.0)
    magnet_sigma: float = Field(6.7e5, gt=0.0)
    magnet_br: float = 1.2
    magnet_mu_r: float = Field(1.0, gt=0.0)
    magnet_angle: Optional[float] = None
    magnet_polarity: Dict[str, int] = Field(default_factory=dict)
    coil_turns: float = Field(10.0, gt=0.0)


class DriveSpec(BaseModel):
    """`[drive]` section: speed, pole pairs and the step grid of one period."""

    model_config = ConfigDict(extra="forbid")

    rpm: float = Field(1500.0, gt=0.0)
    pole_pairs: int = Field(4, ge=1)
    steps_per_period: int = Field(8, ge=1)
    current_peak: float = Field(10.0, ge=0.0)
    phi0: float = 0.0
    initial_shift: int = 0

    @property
    def period(self) -> float:
        return 60.0 / (self.rpm * self.pole_pairs)

    @property
    def tau(self) -> float:
        return self.period / self.steps_per_period

    def k_step(self, mesh: Mesh) -> int:
        """Interface shift per time step; 0 for meshes without a sliding interface."""
        rings = interface_rings(mesh)
        if rings is None:
            return 0
        rotation = 2.0 * math.pi / (self.pole_pairs * self.steps_per_period)
        exact = rings.count * rotation / rings.sector_angle
        k = int(round(exact))
        if k < 1 or abs(k - exact) > 1e-9 * max(1.0, exact):
            raise ConfigError(
                f"interface shift per step {exact:.6g} is not a positive integer "
                f"(V = {rings.count}, N = {self.steps_per_period}, p = {self.pole_pairs})")
        return k

    def shift(self, mesh: Mesh, step: int) -> int:
        return self.initial_shift + step * self.k_step(mesh)


@dataclass(frozen=True)
class MaterialTable:
    regions: Dict[int, RegionMaterial]
    _ids: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_ids", np.array(sorted(self.regions), dtype=np.int64))

    def _lookup(self, tri_region: np.ndarray) -> np.ndarray:
        return np.searchsorted(self._ids, tri_region)

    def sigma_of(self, tri_region: np.ndarray) -> np.ndarray:
        table = np.array([self.regions[int(r)].sigma for r in self._ids])
        return table[self._lookup(tri_region)]

    def mperp_of(self, tri_region: np.ndarray) -> np.ndarray:
        table = np.array([magnetization_perp(self, int(r)) for r in self._ids]).reshape(-1, 2)
        return table[self._lookup(tri_region)]

    def reluctivity_of(self, tri_region: np.ndarray, b2: np.ndarray) -> Reluctivity:
        """Per-triangle reluctivity, evaluated once per distinct model."""
        nu = np.empty_like(b2, dtype=float)
        dnu = np.empty_like(b2, dtype=float)
        clamped = 0
        groups: Dict[ReluctivityModel, List[int]] = {}
        for rid in self._ids.tolist():
            groups.setdefault(self.regions[rid].reluctivity, []).append(rid)
        for model, rids in groups.items():
            sel = np.isin(tri_region, rids)
            if not sel.any():
                continue
            out = reluctivity_eval(model, b2[sel])
            nu[sel], dnu[sel] = out.nu, out.dnu
            clamped += out.clamped
        if clamped:
            logger.warning(f"Reluctivity exponent clamped on {clamped} elements")
        return Reluctivity(nu, dnu, clamped)

    def is_linear(self) -> bool:
        return all(m.reluctivity.kind == "linear" for m in self.regions.values())

    def source_of(self, tri_region: np.ndarray, drive: DriveSpec, step: int) -> np.ndarray:
        table = np.array([source_density(self, drive, int(r), step) for r in self._ids])
        return table[self._lookup(tri_region)]


def source_density(table: MaterialTable, drive: DriveSpec, region: int, step: int) -> float:
    """Impressed current density f_j of a coil region (0 elsewhere)."""
    source = table.regions[region].source
    if source is None:
        return 0.0
    angle = (2.0 * math.pi * step / drive.steps_per_period + drive.phi0
             + PHASE_OFFSETS[source.phase])
    return source.polarity * source.turns * drive.current_peak * math.sin(angle) / source.slot_area


def magnetization_perp(table: MaterialTable, region: int) -> np.ndarray:
    mx, my = table.regions[region].magnetization
    return np.array([-my, mx])


def _region_area_and_centroid(mesh: Mesh, rid: int) -> Tuple[float, np.ndarray]:
    sel = mesh.tri_region == rid
    areas = mesh.signed_areas()[sel]
    centroids = mesh.nodes[mesh.triangles[sel]].mean(axis=1)
    total = float(areas.sum())
    return total, (areas[:, None] * centroids).sum(axis=0) / total


def build_material_table(mesh: Mesh, spec: MaterialsSpec) -> MaterialTable:
    """
    Materials for every region of `mesh`.

    Coil slot areas and magnet centroids are measured on this mesh and kept
    fixed afterwards; both live outside the design region.
    """
    vacuum = ReluctivityModel.linear(NU0)
    if spec.iron_model == "brauer":
        iron = ReluctivityModel.brauer(spec.brauer_k1, spec.brauer_k2, spec.brauer_k3, spec.exp_cap)
    else:
        iron = ReluctivityModel.linear(NU0 / spec.iron_mu_r)

    regions: Dict[int, RegionMaterial] = {}
    for rid, role in sorted(mesh.region_table.items()):
        if role.kind in ("iron_rotor", "iron_stator"):
            regions[rid] = RegionMaterial(role.kind, iron)
        elif role.kind == "magnet":
            polarity = spec.magnet_polarity.get(str(role.index), 1 if role.index % 2 else -1)
            if spec.magnet_angle is not None:
                angle = spec.magnet_angle
            else:
                _, centroid = _region_area_and_centroid(mesh, rid)
                if np.hypot(*centroid) < 1e-12:
                    raise ConfigError(f"magnet {role.index} is centred at the origin; set magnet_angle")
                angle = math.atan2(centroid[1], centroid[0])
            strength = NU0 * spec.magnet_br * polarity
            regions[rid] = RegionMaterial(
                role.kind, ReluctivityModel.linear(NU0 / spec.magnet_mu_r), spec.magnet_sigma,
                (strength * math.cos(angle), strength * math.sin(angle)))
        elif role.kind == "coil":
            area = float(mesh.signed_areas()[mesh.tri_region == rid].sum())
            source = CoilSource(role.phase or "A", role.polarity, spec.coil_turns, area) if area > 0 else None
            regions[rid] = RegionMaterial(role.kind, vacuum, source=source)
        else:
            regions[rid] = RegionMaterial(role.kind, vacuum)
    logger.debug(f"Built material table for {len(regions)} regions")
    return MaterialTable(regions)
