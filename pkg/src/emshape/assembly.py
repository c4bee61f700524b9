"""
P1 finite element assembly, constraint reduction and the linear solve.

All element loops are vectorized over triangles; local 3x3 blocks are
scattered through COO triplets, which scipy sums on conversion.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import norm as sparse_norm

from .cache import FactorCache, get_factor_cache
from .materials import DriveSpec, MaterialTable
from .mesh import ConstraintMap, Mesh
from .shared_utils import MeshValidationError, SolverError

logger = logging.getLogger(__name__)

SourceFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]

P1_MASS = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


@dataclass(frozen=True)
class Quadrature:
    """Barycentric points and weights normalized to sum to one."""

    points: np.ndarray
    weights: np.ndarray


CENTROID_RULE = Quadrature(np.full((1, 3), 1.0 / 3.0), np.array([1.0]))
EDGE_MIDPOINT_RULE = Quadrature(
    np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]),
    np.full(3, 1.0 / 3.0),
)


@dataclass(frozen=True)
class ElementGeometry:
    area: np.ndarray
    grads: np.ndarray  # (m, 3, 2) P1 basis gradients

    def gradient_of(self, mesh: Mesh, u: np.ndarray) -> np.ndarray:
        """Elementwise constant gradient of a nodal field, shape (m, 2)."""
        return np.einsum("ea,eai->ei", u[mesh.triangles], self.grads)


def element_geometry(mesh: Mesh) -> ElementGeometry:
    p = mesh.nodes[mesh.triangles]
    x, y = p[:, :, 0], p[:, :, 1]
    det = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    bad = np.flatnonzero(det <= 0.0)
    if bad.size:
        raise MeshValidationError("degenerate element", f"triangle {int(bad[0])} has area {0.5 * det[bad[0]]:.3e}")
    # grad phi_a = (y_{a+1} - y_{a+2}, x_{a+2} - x_{a+1}) / det
    grads = np.empty((len(det), 3, 2))
    for a in range(3):
        b, c = (a + 1) % 3, (a + 2) % 3
        grads[:, a, 0] = (y[:, b] - y[:, c]) / det
        grads[:, a, 1] = (x[:, c] - x[:, b]) / det
    return ElementGeometry(0.5 * det, grads)


def quadrature_points(mesh: Mesh, rule: Quadrature = EDGE_MIDPOINT_RULE) -> np.ndarray:
    """Physical quadrature points, shape (m, q, 2)."""
    return np.einsum("qa,eai->eqi", rule.points, mesh.nodes[mesh.triangles])


def scatter_matrix(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    n = mesh.n_nodes
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def scatter_vector(mesh: Mesh, local: np.ndarray) -> np.ndarray:
    return np.bincount(mesh.triangles.ravel(), weights=local.ravel(), minlength=mesh.n_nodes)


@dataclass(frozen=True)
class DofMap:
    """Signed prolongation from reduced unknowns to full nodal vectors."""

    prolongation: sp.csr_matrix
    masters: np.ndarray

    @classmethod
    def from_constraints(cls, mesh: Mesh, cmap: ConstraintMap) -> "DofMap":
        n = mesh.n_nodes
        slaves = {s for _, s, _ in cmap.pairs}
        masters = np.array([i for i in range(n) if i not in cmap.dirichlet and i not in slaves],
                           dtype=np.int64)
        reduced = np.full(n, -1, dtype=np.int64)
        reduced[masters] = np.arange(masters.size)
        rows, cols, vals = [], [], []
        for node in range(n):
            master, sign = cmap.resolve(node)
            if master < 0:
                continue
            rows.append(node)
            cols.append(reduced[master])
            vals.append(float(sign))
        P = sp.csr_matrix((vals, (rows, cols)), shape=(n, masters.size))
        return cls(P, masters)

    @property
    def n_full(self) -> int:
        return int(self.prolongation.shape[0])

    @property
    def n_reduced(self) -> int:
        return int(self.masters.size)

    def reduce_matrix(self, matrix: sp.spmatrix) -> sp.csr_matrix:
        P = self.prolongation
        return (P.T @ sp.csr_matrix(matrix) @ P).tocsr()

    def reduce_vector(self, vector: np.ndarray) -> np.ndarray:
        return self.prolongation.T @ vector

    def expand(self, reduced: np.ndarray) -> np.ndarray:
        return self.prolongation @ reduced

    def restrict(self, full: np.ndarray) -> np.ndarray:
        """Reduced coordinates of a constraint-consistent full vector."""
        return np.asarray(full)[self.masters]


@dataclass(frozen=True)
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    dofmap: DofMap


def assemble_operator(mesh: Mesh, materials: MaterialTable, u: np.ndarray,
                      geometry: Optional[ElementGeometry] = None) -> Tuple[np.ndarray, sp.csr_matrix]:
    """Residual <A(u), .> and tangent <A'(u) ., .> of the nonlinear stiffness form."""
    geo = geometry or element_geometry(mesh)
    g = geo.gradient_of(mesh, u)
    rel = materials.reluctivity_of(mesh.tri_region, np.einsum("ei,ei->e", g, g))
    gG = np.einsum("ei,eai->ea", g, geo.grads)
    residual = scatter_vector(mesh, (geo.area * rel.nu)[:, None] * gG)
    GG = np.einsum("eai,ebi->eab", geo.grads, geo.grads)
    local = geo.area[:, None, None] * (
        rel.nu[:, None, None] * GG + 2.0 * rel.dnu[:, None, None] * gG[:, :, None] * gG[:, None, :])
    return residual, scatter_matrix(mesh, local)


def assemble_mass_sigma(mesh: Mesh, materials: MaterialTable, tau: float,
                        geometry: Optional[ElementGeometry] = None) -> sp.csr_matrix:
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    sigma = materials.sigma_of(mesh.tri_region)
    cond = np.flatnonzero(sigma > 0.0)
    n = mesh.n_nodes
    if cond.size == 0:
        return sp.csr_matrix((n, n))
    area = (geometry or element_geometry(mesh)).area[cond]
    local = (sigma[cond] * area / tau)[:, None, None] * P1_MASS[None]
    tris = mesh.triangles[cond]
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def assemble_load(mesh: Mesh, materials: MaterialTable, drive: DriveSpec, step: int,
                  source: Optional[SourceFunction] = None,
                  geometry: Optional[ElementGeometry] = None) -> np.ndarray:
    """F_j(w) = sum_T f_j(T) int_T w + int_T Mperp . grad w (+ int f_ext w if given)."""
    geo = geometry or element_geometry(mesh)
    f = materials.source_of(mesh.tri_region, drive, step)
    mperp = materials.mperp_of(mesh.tri_region)
    local = (f * geo.area / 3.0)[:, None] + geo.area[:, None] * np.einsum("ei,eai->ea", mperp, geo.grads)
    if source is not None:
        rule = EDGE_MIDPOINT_RULE
        pts = quadrature_points(mesh, rule)
        values = np.asarray(source(pts[..., 0], pts[..., 1]), dtype=float)
        local += np.einsum("eq,q,qa->ea", values, rule.weights, rule.points) * geo.area[:, None]
    return scatter_vector(mesh, local)


def reduce_and_solve(system: SparseSystem, tol: float = 1e-10,
                     cache: Optional[FactorCache] = None) -> np.ndarray:
    """Direct sparse solve of the reduced system, expanded back to all nodes."""
    dofmap = system.dofmap
    b = np.asarray(system.rhs, dtype=float)
    if dofmap.n_reduced == 0:
        return np.zeros(dofmap.n_full)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return np.zeros(dofmap.n_full)
    A = system.matrix
    factor = (cache or get_factor_cache()).factor(A)
    a_norm = float(sparse_norm(A, np.inf))

    def backward_error(x: np.ndarray) -> float:
        # normwise backward error ||b - Ax|| / (||A|| ||x|| + ||b||)
        return float(np.linalg.norm(b - A @ x)) / (a_norm * float(np.linalg.norm(x)) + b_norm)

    x = factor.solve(b)
    residual = backward_error(x)
    if not np.isfinite(residual) or residual > tol:
        # one round of iterative refinement before giving up
        x = x + factor.solve(b - A @ x)
        residual = backward_error(x)
        if not np.isfinite(residual) or residual > tol:
            raise SolverError("linear solve did not reach tolerance", residual)
    logger.debug(f"Linear solve: {dofmap.n_reduced} dofs, relative residual {residual:.2e}")
    return dofmap.expand(x)
