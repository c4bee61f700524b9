"""
Discrete shape gradient, descent field, line search and the optimization loop.

The shape gradient is the partial derivative of the fully discrete
Lagrangian with respect to node coordinates at fixed state and adjoint
values. For a perturbation field theta with elementwise gradient
Theta = grad(theta), every element quantity varies as

    d(area) = area * tr(Theta),    d(grad phi_a) = -Theta^T grad(phi_a),

so each term reduces to Theta : Z for a per-element 2x2 tensor Z, and the
node gradient is area * Z @ grad(phi_c) on each vertex c.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .adjoint import AdjointTrajectory, solve_adjoint
from .assembly import EDGE_MIDPOINT_RULE, P1_MASS, ElementGeometry, element_geometry, quadrature_points
from .cache import FactorCache, get_factor_cache
from .materials import DriveSpec, MaterialTable, build_material_table
from .mesh import DESIGN_ROLES, Mesh, advect, design_mask, quality
from .quantities import (CostBreakdown, TorqueAnnulus, arkkio_q, conducting_groups, cost, eddy_density,
                         torque_annulus, torque_weight)
from .run_config import (CostSpec, FlagsSpec, GradCheckSettings, RunConfig, ShapeOptSettings,
                         SolverSettings)
from .shared_utils import ConfigError, SolverError
from .state import StateTrajectory, solve_trajectory

logger = logging.getLogger(__name__)

IDENTITY = np.eye(2)


@dataclass
class ShapeProblem:
    """Everything besides the mesh that a reduced-cost evaluation needs."""

    materials: MaterialTable
    drive: DriveSpec
    cost: CostSpec = field(default_factory=CostSpec)
    flags: FlagsSpec = field(default_factory=FlagsSpec)
    solver: SolverSettings = field(default_factory=SolverSettings)
    shapeopt: ShapeOptSettings = field(default_factory=ShapeOptSettings)
    gradcheck: GradCheckSettings = field(default_factory=GradCheckSettings)
    cache: Optional[FactorCache] = None

    @classmethod
    def from_config(cls, config: RunConfig, mesh: Mesh) -> "ShapeProblem":
        return cls(build_material_table(mesh, config.materials), config.drive, config.cost,
                   config.flags, config.solver, config.shapeopt, config.gradcheck)


@dataclass
class Evaluation:
    mesh: Mesh
    traj: StateTrajectory
    breakdown: CostBreakdown

    @property
    def J(self) -> float:
        return self.breakdown.J


@dataclass
class ShapeGradient:
    g: np.ndarray
    free_mask: np.ndarray

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.g))


@dataclass
class DescentResult:
    theta: np.ndarray
    b_value: float
    g_dot_theta: float


@dataclass
class LineSearchResult:
    accepted: bool
    t: float
    t0: float
    trials: int
    mesh: Optional[Mesh] = None
    evaluation: Optional[Evaluation] = None
    reason: Optional[str] = None


@dataclass
class HistoryRow:
    iter: int
    J: float
    P: float
    T: float
    step: float
    min_quality: float
    grad_norm: float


@dataclass
class OptimizationHistory:
    rows: List[HistoryRow] = field(default_factory=list)
    descent: List[DescentResult] = field(default_factory=list)
    termination: Optional[str] = None
    initial_mesh: Optional[Mesh] = None
    final_mesh: Optional[Mesh] = None

    def to_frame(self) -> pd.DataFrame:
        columns = ["iter", "J", "P", "T", "step", "min_quality", "grad_norm"]
        return pd.DataFrame([[getattr(r, c) for c in columns] for r in self.rows], columns=columns)


@dataclass
class GradientCheckRow:
    node: int
    coord: int
    analytic: float
    fd: float
    rel_err: float
    inconclusive: bool


@dataclass
class GradientCheckReport:
    rows: List[GradientCheckRow]
    requested: int

    @property
    def worst(self) -> float:
        errors = [r.rel_err for r in self.rows if not r.inconclusive]
        return max(errors) if errors else 0.0

    @property
    def inconclusive(self) -> int:
        return sum(r.inconclusive for r in self.rows)

    def to_frame(self) -> pd.DataFrame:
        columns = ["node", "coord", "analytic", "fd", "rel_err"]
        return pd.DataFrame([[getattr(r, c) for c in columns] for r in self.rows], columns=columns)


# ---------------------------------------------------------------------------
# Evaluation and gradient
# ---------------------------------------------------------------------------

def evaluate(mesh: Mesh, problem: ShapeProblem) -> Evaluation:
    """Reduced cost J(mesh): full state solve followed by the cost breakdown."""
    traj = solve_trajectory(mesh, problem.materials, problem.drive, problem.solver, cache=problem.cache)
    breakdown = cost(traj, mesh, problem.materials, problem.cost, problem.flags)
    return Evaluation(mesh, traj, breakdown)


def _stiffness_tensor(g: np.ndarray, h: np.ndarray, nu: np.ndarray, dnu: np.ndarray) -> np.ndarray:
    gh = np.einsum("ei,ei->e", g, h)
    gg = g[:, :, None] * g[:, None, :]
    sym = g[:, :, None] * h[:, None, :] + h[:, :, None] * g[:, None, :]
    return ((nu * gh)[:, None, None] * IDENTITY - (2.0 * dnu * gh)[:, None, None] * gg
            - nu[:, None, None] * sym)


def _load_tensor(mesh: Mesh, materials: MaterialTable, drive: DriveSpec, step: int,
                 v: np.ndarray, h: np.ndarray, mperp: np.ndarray) -> np.ndarray:
    """Tensor of -F_j(v): coil term through the area, magnet term through area and gradients."""
    f = materials.source_of(mesh.tri_region, drive, step)
    v_mean = v[mesh.triangles].mean(axis=1)
    mh = np.einsum("ei,ei->e", mperp, h)
    Z_mag = mh[:, None, None] * IDENTITY - h[:, :, None] * mperp[:, None, :]
    return -(f * v_mean)[:, None, None] * IDENTITY - Z_mag


def _power_area_sensitivity(field_, sigma: np.ndarray, area: np.ndarray, axial_length: float) -> np.ndarray:
    """dP_j/d(area_f) at fixed nodal potentials."""
    out = np.zeros_like(area)
    for tris in field_.components:
        a, jt, s = area[tris], field_.J_tilde[tris], sigma[tris]
        weighted = float(np.sum(a * jt / s))
        out[tris] = axial_length * (jt ** 2 / s - 2.0 * jt / a.sum() * weighted)
    return out


def _torque_terms(mesh: Mesh, geo: ElementGeometry, annulus: TorqueAnnulus, u: np.ndarray,
                  scale: float, Z: np.ndarray, node_local: np.ndarray) -> None:
    """Add scale * dT/dX: gradient and area terms into Z, quadrature point motion into node_local."""
    rule = EDGE_MIDPOINT_RULE
    tris = annulus.triangles
    pts = quadrature_points(mesh, rule)[tris]
    Q = arkkio_q(pts)
    g = geo.gradient_of(mesh, u)[tris]
    Qg = np.einsum("eqij,ej->eqi", Q, g)
    phi = np.einsum("eqi,ei->eq", Qg, g)
    kappa = annulus.kappa
    Z[tris] += scale * kappa * np.einsum(
        "q,eqij->eij", rule.weights,
        phi[:, :, None, None] * IDENTITY - 2.0 * g[:, None, :, None] * Qg[:, :, None, :])

    x, y = pts[..., 0], pts[..., 1]
    r = np.hypot(x, y)
    a = (g[:, 0] ** 2 - g[:, 1] ** 2)[:, None]
    b = (g[:, 0] * g[:, 1])[:, None]
    numer = x * y * a + (y * y - x * x) * b
    dphi = np.stack([(y * a - 2.0 * x * b) / r - numer * x / r ** 3,
                     (x * a + 2.0 * y * b) / r - numer * y / r ** 3], axis=-1)
    weighted = rule.weights[None, :, None] * dphi * geo.area[tris, None, None]
    node_local[tris] += scale * kappa * np.einsum("eqi,qc->eci", weighted, rule.points)


def shape_gradient(mesh: Mesh, traj: StateTrajectory, adj: AdjointTrajectory, materials: MaterialTable,
                   drive: DriveSpec, spec: CostSpec, flags: Optional[FlagsSpec] = None) -> ShapeGradient:
    """dL/dX at fixed u_j and v_j, masked to the free design nodes."""
    flags = flags or FlagsSpec()
    N = traj.n_steps
    if len(adj.v) != N + 1 or any(u.shape[0] != mesh.n_nodes for u in traj.u):
        raise ValueError("trajectory and mesh sizes are inconsistent")
    geo = element_geometry(mesh)
    sigma = materials.sigma_of(mesh.tri_region)
    mperp = materials.mperp_of(mesh.tri_region)
    groups = conducting_groups(mesh, flags.per_component_mean)
    Z = np.zeros((mesh.n_triangles, 2, 2))
    node_local = np.zeros((mesh.n_triangles, 3, 2))

    def residual_terms(step: int, u: np.ndarray, v: np.ndarray, u_prev: Optional[np.ndarray]) -> None:
        g = geo.gradient_of(mesh, u)
        h = geo.gradient_of(mesh, v)
        rel = materials.reluctivity_of(mesh.tri_region, np.einsum("ei,ei->e", g, g))
        Z[:] += _stiffness_tensor(g, h, rel.nu, rel.dnu)
        Z[:] += _load_tensor(mesh, materials, drive, step, v, h, mperp)
        if u_prev is not None:
            du = (u - u_prev)[mesh.triangles]
            c = sigma / traj.tau * np.einsum("ea,ab,eb->e", v[mesh.triangles], P1_MASS, du)
            Z[:] += c[:, None, None] * IDENTITY

    for j in range(1, N + 1):
        if adj.v[j] is not None:
            residual_terms(j, traj.u[j], adj.v[j], traj.u[j - 1])
    if adj.v[0] is not None:
        residual_terms(0, traj.u[0], adj.v[0], None)

    if spec.lambda1 > 0.0:
        for j in range(1, N + 1):
            field_ = eddy_density(traj.u[j], traj.u[j - 1], mesh, materials, traj.tau,
                                  flags.per_component_mean, geo, groups)
            dPdA = _power_area_sensitivity(field_, sigma, geo.area, spec.axial_length)
            Z += (spec.lambda1 / N * dPdA)[:, None, None] * IDENTITY

    if spec.lambda2 > 0.0:
        annulus = torque_annulus(mesh, spec)
        scale = -spec.lambda2 * torque_weight(N, flags.paper_literal_torque_sum)
        for j in range(1, N + 1):
            _torque_terms(mesh, geo, annulus, traj.u[j], scale, Z, node_local)

    local = geo.area[:, None, None] * np.einsum("eij,ecj->eci", Z, geo.grads) + node_local
    g_nodes = np.zeros((mesh.n_nodes, 2))
    np.add.at(g_nodes, mesh.triangles, local)
    free = design_mask(mesh)
    g_nodes[~free] = 0.0
    return ShapeGradient(g_nodes, free)


def gradient(evaluation: Evaluation, problem: ShapeProblem) -> ShapeGradient:
    """Adjoint sweep plus shape gradient for an evaluated mesh."""
    adj = solve_adjoint(evaluation.traj, evaluation.mesh, problem.materials, problem.cost,
                        problem.flags, problem.solver, problem.cache)
    return shape_gradient(evaluation.mesh, evaluation.traj, adj, problem.materials, problem.drive,
                          problem.cost, problem.flags)


# ---------------------------------------------------------------------------
# Descent direction and line search
# ---------------------------------------------------------------------------

def descent_matrix(mesh: Mesh, alpha_cr: float = 1.0, eps0: float = 1e-6) -> sp.csr_matrix:
    """
    Vector P1 form on the rotor design region, dofs ordered (2*node + component).

    Symmetric-gradient energy plus the Cauchy-Riemann term weighted by
    alpha_cr, plus eps0 (relative to the form's diagonal scale) times the
    vector mass matrix.
    """
    geo = element_geometry(mesh)
    design = np.flatnonzero(mesh.triangle_mask(tuple(DESIGN_ROLES)))
    G = geo.grads[design]
    area = geo.area[design]
    k = design.size
    B_a1 = np.zeros((k, 6))
    B_a2 = np.zeros((k, 6))
    B_s = np.zeros((k, 6))
    B_a1[:, 0::2] = G[:, :, 0]
    B_a2[:, 1::2] = G[:, :, 1]
    B_s[:, 1::2] = G[:, :, 0]
    B_s[:, 0::2] = G[:, :, 1]

    def outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a[:, :, None] * b[:, None, :]

    diff = B_a1 - B_a2
    K_local = area[:, None, None] * (2.0 * outer(B_a1, B_a1) + 2.0 * outer(B_a2, B_a2) + outer(B_s, B_s)
                                     + alpha_cr * (outer(diff, diff) + outer(B_s, B_s)))
    M_local = area[:, None, None] * np.kron(P1_MASS, IDENTITY)[None]

    dofs = np.empty((k, 6), dtype=np.int64)
    dofs[:, 0::2] = 2 * mesh.triangles[design]
    dofs[:, 1::2] = 2 * mesh.triangles[design] + 1
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    n = 2 * mesh.n_nodes
    K = sp.coo_matrix((K_local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    M = sp.coo_matrix((M_local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    used = np.unique(dofs)
    scale = float(K.diagonal()[used].mean() / M.diagonal()[used].mean()) if used.size else 0.0
    return (K + eps0 * scale * M).tocsr()


def descent_field(mesh: Mesh, grad: ShapeGradient, alpha_cr: float = 1.0, eps0: float = 1e-6,
                  cache: Optional[FactorCache] = None) -> DescentResult:
    """theta with b(theta, W) = -g . W for all admissible W."""
    free_nodes = np.flatnonzero(grad.free_mask)
    if free_nodes.size == 0:
        raise SolverError("descent field: the design region has no free nodes")
    free_dofs = np.column_stack([2 * free_nodes, 2 * free_nodes + 1]).ravel()
    g_free = grad.g.reshape(-1)[free_dofs]
    theta = np.zeros(2 * mesh.n_nodes)
    if not np.any(g_free):
        return DescentResult(theta.reshape(-1, 2), 0.0, 0.0)
    K = descent_matrix(mesh, alpha_cr, eps0)[free_dofs][:, free_dofs].tocsc()
    factor = (cache or get_factor_cache()).factor(K)
    theta_free = factor.solve(-g_free)
    theta[free_dofs] = theta_free
    b_value = float(theta_free @ (K @ theta_free))
    g_dot = float(g_free @ theta_free)
    logger.debug(f"Descent field: b(theta, theta) = {b_value:.6e}, g . theta = {g_dot:.6e}")
    return DescentResult(theta.reshape(-1, 2), b_value, g_dot)


def local_edge_length(mesh: Mesh) -> np.ndarray:
    """Per node, the shortest incident triangle edge."""
    tris = mesh.triangles
    out = np.full(mesh.n_nodes, np.inf)
    for a, b in ((0, 1), (1, 2), (2, 0)):
        length = np.linalg.norm(mesh.nodes[tris[:, a]] - mesh.nodes[tris[:, b]], axis=1)
        np.minimum.at(out, tris[:, a], length)
        np.minimum.at(out, tris[:, b], length)
    return out


def line_search(mesh: Mesh, theta: np.ndarray, J_current: float,
                evaluate_fn: Callable[[Mesh], Evaluation],
                settings: Optional[ShapeOptSettings] = None) -> LineSearchResult:
    """Backtracking with halving under a quality guard and strict cost decrease."""
    settings = settings or ShapeOptSettings()
    theta = np.asarray(theta, dtype=float).reshape(-1, 2)
    magnitude = np.linalg.norm(theta, axis=1)
    if magnitude.max(initial=0.0) == 0.0:
        return LineSearchResult(False, 0.0, 0.0, 0, reason="zero direction")
    moving = magnitude > 0.0
    t0 = settings.step_fraction * float(local_edge_length(mesh)[moving].min()) / float(magnitude.max())

    reason = None
    trials = 0
    for halving in range(settings.max_halvings + 1):
        t = t0 * 0.5 ** halving
        if t < settings.step_floor * t0:
            logger.debug(f"Line search t = {t:.3e} is below the step floor")
            break
        trials += 1
        trial = advect(mesh, theta, t)
        report = quality(trial)
        if report.inverted_count > 0 or report.min_quality < settings.quality_floor:
            logger.debug(f"Line search t = {t:.3e}: quality {report.min_quality:.4f} rejected")
            reason = "quality"
            continue
        evaluation = evaluate_fn(trial)
        if evaluation.J < J_current:
            logger.debug(f"Line search accepted t = {t:.3e} after {halving} halvings")
            return LineSearchResult(True, t, t0, trials, trial, evaluation)
        logger.debug(f"Line search t = {t:.3e}: J = {evaluation.J:.9e} not below {J_current:.9e}")
        reason = "cost"
    return LineSearchResult(False, 0.0, t0, trials, reason=reason)


# ---------------------------------------------------------------------------
# Outer loop and gradient check
# ---------------------------------------------------------------------------

def optimize(mesh: Mesh, problem: ShapeProblem,
             callback: Optional[Callable[[int, Evaluation, ShapeGradient], None]] = None) -> OptimizationHistory:
    """State, adjoint, gradient, descent and line search until a stopping rule fires."""
    settings = problem.shapeopt
    history = OptimizationHistory(initial_mesh=mesh)
    step = 0.0
    evaluation = evaluate(mesh, problem)
    iteration = 0
    while True:
        try:
            grad = gradient(evaluation, problem)
            report = quality(evaluation.mesh)
            b = evaluation.breakdown
            history.rows.append(HistoryRow(iteration, b.J, b.power, b.torque, step,
                                           report.min_quality, grad.norm))
            logger.info(f"Iteration {iteration}: J = {b.J:.9e}, P = {b.power:.6e}, "
                        f"T = {b.torque:.6e}, min quality {report.min_quality:.4f}")
            if callback is not None:
                callback(iteration, evaluation, grad)
            if report.min_quality < settings.quality_floor or report.inverted_count:
                history.termination = "quality_floor"
                break
            if iteration >= settings.max_iters:
                history.termination = "max_iters"
                break
            descent = descent_field(evaluation.mesh, grad, settings.alpha_cr, settings.eps0, problem.cache)
            history.descent.append(descent)
            result = line_search(evaluation.mesh, descent.theta, b.J,
                                 lambda m: evaluate(m, problem), settings)
        except SolverError as e:
            raise e.with_iteration(iteration)
        if not result.accepted:
            history.termination = "quality_floor" if result.reason == "quality" else "step_floor"
            logger.info(f"Line search rejected ({result.reason}); stopping")
            break
        assert result.evaluation is not None
        evaluation = result.evaluation
        step = result.t
        iteration += 1
    history.final_mesh = evaluation.mesh
    logger.info(f"Optimization finished after {iteration} accepted iterations: {history.termination}")
    return history


def score_direction(analytic: float, j_plus: float, j_minus: float, eps: float,
                    noise_rel: float, scale: float) -> Tuple[float, float, bool]:
    """Central difference, relative error and resolvability of one direction.

    The reduced cost carries an error of about noise_rel * |J| from the
    nonlinear and linear solves. A direction whose measured and predicted
    change of J both stay under that level cannot be scored and is flagged
    inconclusive. The same level, converted to a derivative, floors the
    relative error denominator.
    """
    fd = (j_plus - j_minus) / (2.0 * eps)
    noise = max(noise_rel, 100.0 * np.finfo(float).eps) * max(abs(j_plus), abs(j_minus))
    inconclusive = abs(j_plus - j_minus) <= noise and 2.0 * eps * abs(analytic) <= noise
    denominator = max(abs(analytic), abs(fd), noise / (2.0 * eps), 1e-6 * scale)
    rel_err = abs(analytic - fd) / denominator if denominator > 0.0 else 0.0
    return fd, float(rel_err), bool(inconclusive)


def fd_gradient_check(mesh: Mesh, problem: ShapeProblem, samples: Optional[int] = None,
                      eps_factor: Optional[float] = None, seed: Optional[int] = None) -> GradientCheckReport:
    """Central finite differences of the reduced cost against the adjoint shape gradient."""
    settings = problem.gradcheck
    samples = settings.samples if samples is None else samples
    eps_factor = settings.eps_factor if eps_factor is None else eps_factor
    seed = settings.seed if seed is None else seed
    if eps_factor <= 0.0:
        raise ConfigError("finite-difference step must be positive")

    base = evaluate(mesh, problem)
    grad = gradient(base, problem)
    free = np.flatnonzero(grad.free_mask)
    if free.size == 0:
        raise ConfigError("mesh has no free design nodes to check")
    if samples > free.size:
        logger.warning(f"Requested {samples} samples but only {free.size} free nodes; clamping")
        samples = int(free.size)
    rng = np.random.default_rng(seed)
    nodes = np.sort(rng.choice(free, size=samples, replace=False))
    h_local = local_edge_length(mesh)
    scale = float(np.abs(grad.g).max())
    noise_rel = settings.noise_margin * max(problem.solver.newton_tol, problem.solver.linear_tol)

    rows: List[GradientCheckRow] = []
    for node in nodes.tolist():
        eps = eps_factor * float(h_local[node])
        for coord in (0, 1):
            values = []
            for sign in (1.0, -1.0):
                moved = np.array(mesh.nodes)
                moved[node, coord] += sign * eps
                values.append(evaluate(mesh.with_nodes(moved), problem).J)
            j_plus, j_minus = values
            analytic = float(grad.g[node, coord])
            fd, rel_err, inconclusive = score_direction(analytic, j_plus, j_minus, eps, noise_rel, scale)
            rows.append(GradientCheckRow(int(node), coord, analytic, fd, rel_err, inconclusive))
            logger.debug(f"Gradient check node {node} coord {coord}: analytic {analytic:.9e}, "
                         f"fd {fd:.9e}, rel err {rel_err:.2e}{' (inconclusive)' if inconclusive else ''}")
    report = GradientCheckReport(rows, samples)
    logger.info(f"Gradient check over {len(rows)} directions: worst relative error {report.worst:.3e}, "
                f"{report.inconclusive} inconclusive")
    return report
