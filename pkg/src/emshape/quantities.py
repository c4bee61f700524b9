"""
Post-processed quantities: zero-mean eddy-current density, dissipated power,
Arkkio torque and the scalarized cost, together with their derivatives with
respect to nodal potentials.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from .assembly import (EDGE_MIDPOINT_RULE, ElementGeometry, element_geometry, quadrature_points,
                       scatter_vector)
from .materials import NU0, MaterialTable
from .mesh import Mesh, magnet_components
from .run_config import CostSpec, FlagsSpec
from .shared_utils import ConfigError

logger = logging.getLogger(__name__)

AIRGAP_ROLES = ("airgap_rotor", "airgap_stator")


@dataclass(frozen=True)
class EddyField:
    J: np.ndarray
    J_tilde: np.ndarray
    components: List[np.ndarray]
    means: np.ndarray


@dataclass(frozen=True)
class CostBreakdown:
    power_steps: np.ndarray
    torque_steps: np.ndarray
    power: float
    torque: float
    J: float
    lambda1: float
    lambda2: float


@dataclass(frozen=True)
class TorqueAnnulus:
    triangles: np.ndarray
    r_rotor: float
    r_stator: float
    axial_length: float

    @property
    def kappa(self) -> float:
        return NU0 * self.axial_length / (self.r_stator - self.r_rotor)


def conducting_groups(mesh: Mesh, per_component_mean: bool = True) -> List[np.ndarray]:
    """Triangle sets over which the eddy current is made zero-mean."""
    components = magnet_components(mesh)
    if per_component_mean or not components:
        return components
    return [np.sort(np.concatenate(components))]


def eddy_density(u_j: np.ndarray, u_prev: np.ndarray, mesh: Mesh, materials: MaterialTable,
                 tau: float, per_component_mean: bool = True,
                 geometry: Optional[ElementGeometry] = None,
                 groups: Optional[List[np.ndarray]] = None) -> EddyField:
    """J_e = -sigma * (element mean of u_j - u_{j-1}) / tau, minus its mean per group."""
    geo = geometry or element_geometry(mesh)
    sigma = materials.sigma_of(mesh.tri_region)
    du = (np.asarray(u_j) - np.asarray(u_prev))[mesh.triangles].mean(axis=1)
    J = -sigma * du / tau
    J_tilde = np.zeros_like(J)
    groups = conducting_groups(mesh, per_component_mean) if groups is None else groups
    means = np.zeros(len(groups))
    for c, tris in enumerate(groups):
        area = geo.area[tris]
        means[c] = float(np.dot(area, J[tris]) / area.sum())
        J_tilde[tris] = J[tris] - means[c]
    return EddyField(J, J_tilde, groups, means)


def _power_from_field(field: EddyField, sigma: np.ndarray, area: np.ndarray, axial_length: float) -> float:
    total = 0.0
    for tris in field.components:
        total += float(np.sum(area[tris] * field.J_tilde[tris] ** 2 / sigma[tris]))
    return axial_length * total


def power_step(u_prev: np.ndarray, u_j: np.ndarray, mesh: Mesh, materials: MaterialTable,
               tau: float, axial_length: float, per_component_mean: bool = True,
               geometry: Optional[ElementGeometry] = None) -> float:
    """P_j = l_z * sum over conducting triangles of area * J_tilde^2 / sigma."""
    geo = geometry or element_geometry(mesh)
    field = eddy_density(u_j, u_prev, mesh, materials, tau, per_component_mean, geo)
    return _power_from_field(field, materials.sigma_of(mesh.tri_region), geo.area, axial_length)


def power_density_sensitivity(field: EddyField, sigma: np.ndarray, area: np.ndarray,
                              axial_length: float) -> np.ndarray:
    """dP_j / dJ_f per triangle f (zero outside conducting groups)."""
    out = np.zeros_like(field.J)
    for tris in field.components:
        a, jt, s = area[tris], field.J_tilde[tris], sigma[tris]
        weighted = float(np.sum(a * jt / s))
        out[tris] = 2.0 * axial_length * (a * jt / s - a / a.sum() * weighted)
    return out


def power_step_grad(u_prev: np.ndarray, u_j: np.ndarray, mesh: Mesh, materials: MaterialTable,
                    tau: float, axial_length: float, per_component_mean: bool = True,
                    geometry: Optional[ElementGeometry] = None) -> Tuple[np.ndarray, np.ndarray]:
    """(dP_j/du_j, dP_j/du_{j-1}) as full nodal vectors."""
    geo = geometry or element_geometry(mesh)
    sigma = materials.sigma_of(mesh.tri_region)
    field = eddy_density(u_j, u_prev, mesh, materials, tau, per_component_mean, geo)
    dP_dJ = power_density_sensitivity(field, sigma, geo.area, axial_length)
    # dJ_f / du_a = -sigma_f / (3 tau) for each vertex a of f
    local = np.repeat((-sigma / (3.0 * tau) * dP_dJ)[:, None], 3, axis=1)
    d_uj = scatter_vector(mesh, local)
    return d_uj, -d_uj


def average_power(power_steps: np.ndarray) -> float:
    return float(np.mean(power_steps)) if len(power_steps) else 0.0


def has_airgap(mesh: Mesh) -> bool:
    return bool(mesh.triangle_mask(AIRGAP_ROLES).any())


def torque_annulus(mesh: Mesh, spec: CostSpec) -> TorqueAnnulus:
    """Airgap triangles and the annulus radii (configured or measured on the mesh)."""
    tris = np.flatnonzero(mesh.triangle_mask(AIRGAP_ROLES))
    if tris.size == 0:
        raise ConfigError("torque needs airgap_rotor or airgap_stator regions; the annulus is empty")
    radii = np.hypot(*mesh.nodes[np.unique(mesh.triangles[tris])].T)
    r_rotor = spec.r_rotor if spec.r_rotor is not None else float(radii.min())
    r_stator = spec.r_stator if spec.r_stator is not None else float(radii.max())
    if r_rotor >= r_stator:
        raise ConfigError(f"torque annulus radii out of order: {r_rotor} >= {r_stator}")
    return TorqueAnnulus(tris, r_rotor, r_stator, spec.axial_length)


def arkkio_q(points: np.ndarray) -> np.ndarray:
    """Q(x, y) = (1/r) [[xy, (y^2 - x^2)/2], [(y^2 - x^2)/2, -xy]], shape (..., 2, 2)."""
    x, y = points[..., 0], points[..., 1]
    r = np.hypot(x, y)
    off = 0.5 * (y * y - x * x) / r
    diag = x * y / r
    return np.stack([np.stack([diag, off], -1), np.stack([off, -diag], -1)], -2)


def torque_tensor(mesh: Mesh, annulus: TorqueAnnulus, geometry: ElementGeometry) -> np.ndarray:
    """C_T = sum_q w_q area Q(x_q) for annulus triangles, shape (k, 2, 2)."""
    rule = EDGE_MIDPOINT_RULE
    pts = quadrature_points(mesh, rule)[annulus.triangles]
    Q = arkkio_q(pts)
    return np.einsum("q,eqij->eij", rule.weights, Q) * geometry.area[annulus.triangles, None, None]


def torque_step(u_j: np.ndarray, mesh: Mesh, annulus: TorqueAnnulus,
                geometry: Optional[ElementGeometry] = None) -> float:
    """Arkkio torque of one nodal field."""
    geo = geometry or element_geometry(mesh)
    C = torque_tensor(mesh, annulus, geo)
    g = geo.gradient_of(mesh, u_j)[annulus.triangles]
    return annulus.kappa * float(np.einsum("ei,eij,ej->", g, C, g))


def torque_step_grad(u_j: np.ndarray, mesh: Mesh, annulus: TorqueAnnulus,
                     geometry: Optional[ElementGeometry] = None) -> np.ndarray:
    """dT_j/du_j as a full nodal vector."""
    geo = geometry or element_geometry(mesh)
    C = torque_tensor(mesh, annulus, geo)
    g = geo.gradient_of(mesh, u_j)[annulus.triangles]
    Cg = np.einsum("eij,ej->ei", C, g)
    local = np.zeros((mesh.n_triangles, 3))
    local[annulus.triangles] = 2.0 * annulus.kappa * np.einsum("ei,eai->ea", Cg, geo.grads[annulus.triangles])
    return scatter_vector(mesh, local)


def torque_weight(n_steps: int, paper_literal_torque_sum: bool = False) -> float:
    """Factor applied to sum_j T_j: 1/N for the average, 1 for the bare sum."""
    return 1.0 if paper_literal_torque_sum else 1.0 / n_steps


def average_torque(torque_steps: np.ndarray, paper_literal_torque_sum: bool = False) -> float:
    if len(torque_steps) == 0:
        return 0.0
    return torque_weight(len(torque_steps), paper_literal_torque_sum) * float(np.sum(torque_steps))


def cost(traj, mesh: Mesh, materials: MaterialTable, spec: CostSpec,
         flags: Optional[FlagsSpec] = None,
         geometry: Optional[ElementGeometry] = None) -> CostBreakdown:
    """J = lambda1 * P - lambda2 * T over steps 1..N of a trajectory."""
    flags = flags or FlagsSpec()
    geo = geometry or element_geometry(mesh)
    sigma = materials.sigma_of(mesh.tri_region)
    groups = conducting_groups(mesh, flags.per_component_mean)
    N = len(traj.u) - 1
    power_steps = np.zeros(N)
    for j in range(1, N + 1):
        field = eddy_density(traj.u[j], traj.u[j - 1], mesh, materials, traj.tau,
                             flags.per_component_mean, geo, groups)
        power_steps[j - 1] = _power_from_field(field, sigma, geo.area, spec.axial_length)

    torque_steps = np.zeros(N)
    if spec.lambda2 > 0.0 or has_airgap(mesh):
        annulus = torque_annulus(mesh, spec)
        for j in range(1, N + 1):
            torque_steps[j - 1] = torque_step(traj.u[j], mesh, annulus, geo)

    P = average_power(power_steps)
    T = average_torque(torque_steps, flags.paper_literal_torque_sum)
    J = spec.lambda1 * P - spec.lambda2 * T
    logger.debug(f"Cost: P = {P:.6e} W, T = {T:.6e} N m, J = {J:.6e}")
    return CostBreakdown(power_steps, torque_steps, P, T, J, spec.lambda1, spec.lambda2)


def step_table(breakdown: CostBreakdown) -> pd.DataFrame:
    """Per-step power and torque, the body of steps.csv."""
    N = len(breakdown.power_steps)
    return pd.DataFrame({
        "j": np.arange(1, N + 1),
        "P_j": breakdown.power_steps,
        "T_j": breakdown.torque_steps,
    })
