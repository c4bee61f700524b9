"""
Backward-in-time adjoint sweep of the discrete Lagrangian.

Each v_i lives in the constrained space of state step i and is obtained
with that step's converged tangent (mass term included), so the adjoint
reuses the state's reduced matrices and, for linear materials, its factors.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import scipy.sparse as sp

from .assembly import ElementGeometry, SparseSystem, assemble_mass_sigma, element_geometry, reduce_and_solve
from .cache import FactorCache
from .materials import MaterialTable
from .mesh import Mesh
from .quantities import (TorqueAnnulus, power_step_grad, torque_annulus, torque_step_grad,
                         torque_weight)
from .run_config import CostSpec, FlagsSpec, SolverSettings
from .shared_utils import SolverError
from .state import StateTrajectory

logger = logging.getLogger(__name__)


@dataclass
class AdjointTrajectory:
    """v[0] is None unless the initial-condition adjoint was solved."""

    v: List[Optional[np.ndarray]]

    @property
    def has_initial(self) -> bool:
        return self.v[0] is not None


def power_rhs(i: int, traj: StateTrajectory, mesh: Mesh, materials: MaterialTable,
              lambda1: float, axial_length: float, per_component_mean: bool = True,
              geometry: Optional[ElementGeometry] = None) -> np.ndarray:
    """-lambda1/N * (dP_i/du_i + dP_{i+1}/du_i), the second term absent at i = N."""
    N = traj.n_steps
    if not 1 <= i <= N:
        raise ValueError(f"power_rhs step {i} outside 1..{N}")
    if lambda1 == 0.0:
        return np.zeros(mesh.n_nodes)
    geo = geometry or element_geometry(mesh)
    own, _ = power_step_grad(traj.u[i - 1], traj.u[i], mesh, materials, traj.tau, axial_length,
                             per_component_mean, geo)
    total = own
    if i < N:
        _, nxt = power_step_grad(traj.u[i], traj.u[i + 1], mesh, materials, traj.tau, axial_length,
                                 per_component_mean, geo)
        total = total + nxt
    return -lambda1 / N * total


def torque_rhs(i: int, u_i: np.ndarray, mesh: Mesh, annulus: TorqueAnnulus, lambda2: float,
               weight: float, geometry: Optional[ElementGeometry] = None) -> np.ndarray:
    """+lambda2 * weight * dT_i/du_i, weight being 1/N for the averaged torque."""
    if lambda2 == 0.0:
        return np.zeros(mesh.n_nodes)
    return lambda2 * weight * torque_step_grad(u_i, mesh, annulus, geometry)


def _solve_with_tangent(traj: StateTrajectory, i: int, rhs: np.ndarray, linear_tol: float,
                        cache: Optional[FactorCache]) -> np.ndarray:
    info = traj.steps[i]
    if info.tangent is None:
        raise SolverError("state step has no converged tangent", step=i)
    system = SparseSystem(info.tangent, info.dofmap.reduce_vector(rhs), info.dofmap)
    try:
        return reduce_and_solve(system, linear_tol, cache)
    except SolverError as e:
        raise e.with_step(i)


def adjoint_step(i: int, v_next: np.ndarray, traj: StateTrajectory, load: np.ndarray,
                 mass: sp.spmatrix, linear_tol: float = 1e-10,
                 cache: Optional[FactorCache] = None) -> np.ndarray:
    """[A_i'(u_i) + M_sigma/tau] v_i = load + (M_sigma/tau) v_{i+1} in step i's constrained space."""
    return _solve_with_tangent(traj, i, load + mass @ v_next, linear_tol, cache)


def initial_adjoint(traj: StateTrajectory, v_1: np.ndarray, mesh: Mesh, materials: MaterialTable,
                    lambda1: float, axial_length: float, mass: sp.spmatrix,
                    per_component_mean: bool = True, linear_tol: float = 1e-10,
                    geometry: Optional[ElementGeometry] = None,
                    cache: Optional[FactorCache] = None) -> np.ndarray:
    """A_0'(u_0) v_0 = -lambda1/N * dP_1/du_0 + (M_sigma/tau) v_1."""
    if traj.initial_condition != "magnetostatic":
        raise ValueError("initial adjoint needs a magnetostatic initial condition")
    N = traj.n_steps
    rhs = mass @ v_1
    if lambda1 != 0.0:
        _, d_u0 = power_step_grad(traj.u[0], traj.u[1], mesh, materials, traj.tau, axial_length,
                                  per_component_mean, geometry)
        rhs = rhs - lambda1 / N * d_u0
    return _solve_with_tangent(traj, 0, rhs, linear_tol, cache)


def solve_adjoint(traj: StateTrajectory, mesh: Mesh, materials: MaterialTable, spec: CostSpec,
                  flags: Optional[FlagsSpec] = None, settings: Optional[SolverSettings] = None,
                  cache: Optional[FactorCache] = None) -> AdjointTrajectory:
    """v_N, ..., v_1 backwards, then v_0 when the initial-condition adjoint is enabled."""
    flags = flags or FlagsSpec()
    settings = settings or SolverSettings()
    geo = element_geometry(mesh)
    N = traj.n_steps
    mass = assemble_mass_sigma(mesh, materials, traj.tau, geo)
    annulus = torque_annulus(mesh, spec) if spec.lambda2 > 0.0 else None
    weight = torque_weight(N, flags.paper_literal_torque_sum)

    v: List[Optional[np.ndarray]] = [None] * (N + 1)
    v_next = np.zeros(mesh.n_nodes)
    for i in range(N, 0, -1):
        load = power_rhs(i, traj, mesh, materials, spec.lambda1, spec.axial_length,
                         flags.per_component_mean, geo)
        if annulus is not None:
            load = load + torque_rhs(i, traj.u[i], mesh, annulus, spec.lambda2, weight, geo)
        v_next = adjoint_step(i, v_next, traj, load, mass, settings.linear_tol, cache)
        v[i] = v_next

    if flags.include_initial_adjoint and traj.initial_condition == "magnetostatic" and N >= 1:
        v[0] = initial_adjoint(traj, v[1], mesh, materials, spec.lambda1, spec.axial_length, mass,
                               flags.per_component_mean, settings.linear_tol, geo, cache)
    logger.info(f"Solved adjoint sweep over {N} steps (initial adjoint: {v[0] is not None})")
    return AdjointTrajectory(v)
