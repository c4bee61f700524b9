"""
Magnetostatic initial problem and backward-Euler time stepping over one
electrical period, with the rotor position encoded as a locked-step shift.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .assembly import (DofMap, ElementGeometry, SourceFunction, SparseSystem, assemble_load,
                       assemble_mass_sigma, assemble_operator, element_geometry, reduce_and_solve)
from .cache import FactorCache
from .materials import DriveSpec, MaterialTable
from .mesh import Mesh, build_constraints
from .run_config import SolverSettings
from .shared_utils import SolverError

logger = logging.getLogger(__name__)


@dataclass
class StepInfo:
    """Convergence record of one state solve."""

    step: int
    shift: int
    iterations: int
    residual: float
    history: List[float]
    dofmap: DofMap
    tangent: Optional[sp.csr_matrix] = field(default=None, repr=False)


@dataclass
class StateTrajectory:
    u: List[np.ndarray]
    steps: List[StepInfo]
    tau: float
    initial_condition: str = "magnetostatic"

    @property
    def n_steps(self) -> int:
        return len(self.u) - 1


@dataclass
class _StepContext:
    mesh: Mesh
    materials: MaterialTable
    drive: DriveSpec
    settings: SolverSettings
    geometry: ElementGeometry
    source: Optional[SourceFunction] = None
    cache: Optional[FactorCache] = None


def _newton(ctx: _StepContext, step: int, shift: int, guess: Optional[np.ndarray],
            u_prev: Optional[np.ndarray], mass: Optional[sp.csr_matrix]) -> Tuple[np.ndarray, StepInfo]:
    """Damped Newton on A(u) - F_j (+ M_sigma/tau (u - u_prev)) = 0 in reduced unknowns."""
    settings = ctx.settings
    dofmap = DofMap.from_constraints(ctx.mesh, build_constraints(ctx.mesh, shift))
    load = assemble_load(ctx.mesh, ctx.materials, ctx.drive, step, ctx.source, ctx.geometry)
    if mass is not None:
        load = load + mass @ u_prev

    def residual_and_tangent(u: np.ndarray) -> Tuple[np.ndarray, sp.csr_matrix]:
        r, K = assemble_operator(ctx.mesh, ctx.materials, u, ctx.geometry)
        r = r - load
        if mass is not None:
            r = r + mass @ u
            K = K + mass
        return dofmap.reduce_vector(r), K

    u = dofmap.expand(dofmap.restrict(guess)) if guess is not None else np.zeros(ctx.mesh.n_nodes)
    data_norm = float(np.linalg.norm(dofmap.reduce_vector(load)))
    history: List[float] = []
    reference = 0.0
    small_update = False
    for iteration in range(settings.max_newton_iterations + 1):
        r, K = residual_and_tangent(u)
        norm = float(np.linalg.norm(r))
        history.append(norm)
        if iteration == 0:
            reference = max(norm, data_norm)
        # an update below tolerance means the residual has reached round-off
        if small_update or norm <= max(settings.newton_tol * reference, settings.newton_abs_floor):
            tangent = dofmap.reduce_matrix(K)
            logger.debug(f"Step {step}: Newton converged in {iteration} iterations, residual {norm:.3e}")
            return u, StepInfo(step, shift, iteration, norm / reference if reference else 0.0,
                               history, dofmap, tangent)
        if iteration == settings.max_newton_iterations:
            break
        K_red = dofmap.reduce_matrix(K)
        delta = reduce_and_solve(SparseSystem(K_red, -r, dofmap), settings.linear_tol, ctx.cache)
        if np.abs(delta).max() <= settings.newton_tol * np.abs(u + delta).max():
            u = u + delta
            small_update = True
            continue
        for halving in range(settings.max_halvings + 1):
            trial = u + 0.5 ** halving * delta
            r_trial, _ = assemble_operator(ctx.mesh, ctx.materials, trial, ctx.geometry)
            r_trial = r_trial - load + (mass @ trial if mass is not None else 0.0)
            if np.linalg.norm(dofmap.reduce_vector(r_trial)) < norm:
                if halving:
                    logger.debug(f"Step {step}: Newton step damped by 2^-{halving}")
                u = trial
                break
        else:
            raise SolverError("Newton stagnation", norm / reference, history, step=step)
    raise SolverError("Newton did not converge within the iteration cap",
                      history[-1] / reference if reference else float("nan"), history, step=step)


def _context(mesh: Mesh, materials: MaterialTable, drive: DriveSpec,
             settings: Optional[SolverSettings], source: Optional[SourceFunction],
             cache: Optional[FactorCache]) -> _StepContext:
    return _StepContext(mesh, materials, drive, settings or SolverSettings(),
                        element_geometry(mesh), source, cache)


def solve_magnetostatic(mesh: Mesh, materials: MaterialTable, drive: DriveSpec, step: int,
                        guess: Optional[np.ndarray] = None, settings: Optional[SolverSettings] = None,
                        source: Optional[SourceFunction] = None,
                        cache: Optional[FactorCache] = None) -> np.ndarray:
    """Nonlinear magnetostatic field at rotor position and source phase of step j."""
    ctx = _context(mesh, materials, drive, settings, source, cache)
    u, _ = _newton(ctx, step, drive.shift(mesh, step), guess, None, None)
    return u


def time_step(mesh: Mesh, materials: MaterialTable, drive: DriveSpec, u_prev: np.ndarray,
              step: int, settings: Optional[SolverSettings] = None,
              source: Optional[SourceFunction] = None,
              cache: Optional[FactorCache] = None) -> np.ndarray:
    """One backward-Euler step from the accepted u_{j-1}, warm started there."""
    ctx = _context(mesh, materials, drive, settings, source, cache)
    mass = assemble_mass_sigma(mesh, materials, drive.tau, ctx.geometry)
    u, _ = _newton(ctx, step, drive.shift(mesh, step), u_prev, u_prev, mass)
    return u


def solve_trajectory(mesh: Mesh, materials: MaterialTable, drive: DriveSpec,
                     settings: Optional[SolverSettings] = None,
                     source: Optional[SourceFunction] = None,
                     cache: Optional[FactorCache] = None) -> StateTrajectory:
    """u_0 (magnetostatic or zero) followed by N backward-Euler steps."""
    ctx = _context(mesh, materials, drive, settings, source, cache)
    N = drive.steps_per_period
    mass = assemble_mass_sigma(mesh, materials, drive.tau, ctx.geometry)

    if ctx.settings.initial_condition == "magnetostatic":
        try:
            u0, info0 = _newton(ctx, 0, drive.shift(mesh, 0), None, None, None)
        except SolverError as e:
            raise e.with_step(0)
    else:
        u0 = np.zeros(mesh.n_nodes)
        dofmap0 = DofMap.from_constraints(mesh, build_constraints(mesh, drive.shift(mesh, 0)))
        info0 = StepInfo(0, drive.shift(mesh, 0), 0, 0.0, [], dofmap0)

    u, steps = [u0], [info0]
    for j in range(1, N + 1):
        try:
            uj, info = _newton(ctx, j, drive.shift(mesh, j), u[-1], u[-1], mass)
        except SolverError as e:
            raise e.with_step(j)
        u.append(uj)
        steps.append(info)
    total = sum(s.iterations for s in steps)
    logger.info(f"Solved trajectory: {N} steps, {total} Newton iterations, {mesh.n_nodes} nodes")
    return StateTrajectory(u, steps, drive.tau, ctx.settings.initial_condition)
