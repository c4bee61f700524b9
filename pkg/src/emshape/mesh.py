"""
Triangulation, tagging, rotor-stator constraints and mesh quality.

The mesh is the single geometric source of truth of a run: the optimizer only
ever produces new meshes through `advect`, and every solver rebuilds its
constraints from the mesh tags plus an integer locked-step shift.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .shared_utils import MeshFormatError, MeshValidationError

logger = logging.getLogger(__name__)

PLAIN_REGION_ROLES = (
    "iron_rotor", "iron_stator", "air_rotor", "air_stator",
    "airgap_rotor", "airgap_stator",
)
REGION_ROLES = PLAIN_REGION_ROLES + ("magnet", "coil")
BOUNDARY_ROLES = (
    "outer", "shaft", "periodic_a", "periodic_b",
    "interface_rotor", "interface_stator",
)
ROTOR_ROLES = frozenset({"iron_rotor", "air_rotor", "airgap_rotor", "magnet"})
DESIGN_ROLES = frozenset({"iron_rotor", "air_rotor"})
SYMMETRIES = ("periodic", "antiperiodic")

RING_TOL = 1e-6


@dataclass(frozen=True)
class RegionRole:
    """Role of a region id: plain material, magnet k, or coil k with phase."""

    kind: str
    index: int = 0
    phase: Optional[str] = None
    polarity: int = 0

    @classmethod
    def parse(cls, tokens: Sequence[str]) -> "RegionRole":
        if not tokens:
            raise ValueError("missing region role")
        kind = tokens[0]
        if kind in PLAIN_REGION_ROLES:
            if len(tokens) != 1:
                raise ValueError(f"role {kind} takes no parameters")
            return cls(kind)
        if kind == "magnet":
            if len(tokens) != 2:
                raise ValueError("magnet role expects: magnet <k>")
            return cls(kind, index=int(tokens[1]))
        if kind == "coil":
            if len(tokens) != 4:
                raise ValueError("coil role expects: coil <k> <phase> <polarity>")
            phase = tokens[2].upper()
            if phase not in ("A", "B", "C"):
                raise ValueError(f"unknown coil phase {tokens[2]!r}")
            polarity = int(tokens[3])
            if polarity not in (1, -1):
                raise ValueError(f"coil polarity must be +1 or -1, got {tokens[3]}")
            return cls(kind, index=int(tokens[1]), phase=phase, polarity=polarity)
        raise ValueError(f"unknown region role {kind!r}")

    def tokens(self) -> str:
        if self.kind == "magnet":
            return f"magnet {self.index}"
        if self.kind == "coil":
            return f"coil {self.index} {self.phase} {self.polarity:+d}"
        return self.kind


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable P1 triangulation with region and boundary tags."""

    nodes: np.ndarray
    triangles: np.ndarray
    tri_region: np.ndarray
    edges: np.ndarray
    edge_tag: np.ndarray
    region_table: Dict[int, RegionRole]
    boundary_table: Dict[int, str]
    symmetry: str = "periodic"

    def __post_init__(self):
        frozen = {
            "nodes": np.array(self.nodes, dtype=float).reshape(-1, 2),
            "triangles": np.array(self.triangles, dtype=np.int64).reshape(-1, 3),
            "tri_region": np.array(self.tri_region, dtype=np.int64).reshape(-1),
            "edges": np.array(self.edges, dtype=np.int64).reshape(-1, 2),
            "edge_tag": np.array(self.edge_tag, dtype=np.int64).reshape(-1),
        }
        for name, arr in frozen.items():
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "region_table", dict(self.region_table))
        object.__setattr__(self, "boundary_table", dict(self.boundary_table))

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def n_triangles(self) -> int:
        return int(self.triangles.shape[0])

    def region_ids(self, kinds: Union[str, Sequence[str]]) -> List[int]:
        """Region ids whose role kind is in `kinds`."""
        if isinstance(kinds, str):
            kinds = (kinds,)
        return sorted(rid for rid, role in self.region_table.items() if role.kind in kinds)

    def triangle_mask(self, kinds: Union[str, Sequence[str]]) -> np.ndarray:
        return np.isin(self.tri_region, self.region_ids(kinds))

    def boundary_nodes(self, role: str) -> np.ndarray:
        tags = [tag for tag, r in self.boundary_table.items() if r == role]
        if not tags:
            return np.zeros(0, dtype=np.int64)
        sel = np.isin(self.edge_tag, tags)
        return np.unique(self.edges[sel].ravel())

    def with_nodes(self, nodes: np.ndarray) -> "Mesh":
        """Same connectivity and tags on new node coordinates."""
        return Mesh(nodes, self.triangles, self.tri_region, self.edges, self.edge_tag,
                    self.region_table, self.boundary_table, self.symmetry)

    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def validate(self) -> None:
        """Raise MeshValidationError naming the first violated invariant."""
        n = self.n_nodes
        if self.symmetry not in SYMMETRIES:
            raise MeshValidationError("unknown symmetry", self.symmetry)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise MeshValidationError("triangle node index out of range")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= n):
            raise MeshValidationError("edge node index out of range")
        unknown_regions = set(np.unique(self.tri_region).tolist()) - set(self.region_table)
        if unknown_regions:
            raise MeshValidationError("region id not in region table", str(sorted(unknown_regions)))
        unknown_tags = set(np.unique(self.edge_tag).tolist()) - set(self.boundary_table)
        if unknown_tags:
            raise MeshValidationError("edge tag not in boundary table", str(sorted(unknown_tags)))
        areas = self.signed_areas()
        bad = np.flatnonzero(areas <= 0.0)
        if bad.size:
            raise MeshValidationError("non-positive triangle area", f"triangle {int(bad[0])}")
        interface_rings(self)


@dataclass(frozen=True)
class InterfaceRings:
    """Rotor and stator interface vertices, ordered counterclockwise."""

    rotor: np.ndarray
    stator: np.ndarray
    count: int
    sector_angle: float
    radius: float
    is_sector: bool


@dataclass(frozen=True)
class ConstraintMap:
    """Dirichlet nodes and signed master/slave identifications."""

    dirichlet: FrozenSet[int]
    pairs: Tuple[Tuple[int, int, int], ...]
    locked_shift: int = 0
    shift_turns: int = 0
    _slave_of: Dict[int, Tuple[int, int]] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_slave_of", {s: (m, sg) for m, s, sg in self.pairs})

    def resolve(self, node: int) -> Tuple[int, int]:
        """(master, sign) with u[node] = sign * u[master]; master -1 if fixed to zero."""
        if node in self.dirichlet:
            return -1, 0
        return self._slave_of.get(node, (node, 1))


@dataclass(frozen=True)
class QualityReport:
    min_quality: float
    min_element: int
    inverted_count: int


# ---------------------------------------------------------------------------
# emsh 1 reader / writer
# ---------------------------------------------------------------------------

def _content_lines(text: str) -> List[Tuple[int, List[str]]]:
    lines = []
    for number, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0].strip()
        if content:
            lines.append((number, content.split()))
    return lines


def parse_mesh(text: str) -> Mesh:
    """Parse `emsh 1` text; orientation is fixed, invariants validated."""
    lines = _content_lines(text)
    if not lines or lines[0][1] != ["emsh", "1"]:
        raise MeshFormatError("expected header 'emsh 1'", lines[0][0] if lines else 1)

    sections: Dict[str, List[Tuple[int, List[str]]]] = {}
    symmetry = "periodic"
    pos = 1
    while pos < len(lines):
        number, tokens = lines[pos]
        keyword = tokens[0]
        if keyword == "symmetry":
            if len(tokens) != 2 or tokens[1] not in SYMMETRIES:
                raise MeshFormatError(f"symmetry must be one of {SYMMETRIES}", number)
            symmetry = tokens[1]
            pos += 1
            continue
        if keyword not in ("nodes", "triangles", "edges", "regions", "boundaries"):
            raise MeshFormatError(f"unknown section {keyword!r}", number)
        if keyword in sections:
            raise MeshFormatError(f"duplicate section {keyword!r}", number)
        if len(tokens) != 2:
            raise MeshFormatError(f"expected '{keyword} <count>'", number)
        try:
            count = int(tokens[1])
        except ValueError:
            raise MeshFormatError(f"invalid count {tokens[1]!r}", number) from None
        if count < 0:
            raise MeshFormatError("negative count", number)
        body = lines[pos + 1:pos + 1 + count]
        if len(body) < count:
            raise MeshFormatError(f"section {keyword!r} truncated", number)
        sections[keyword] = body
        pos += 1 + count

    for required in ("nodes", "triangles", "regions"):
        if required not in sections:
            raise MeshFormatError(f"missing section {required!r}", lines[-1][0])

    def numbers(kind: str, width: int, cast):
        rows = []
        for number, tokens in sections.get(kind, []):
            if len(tokens) != width:
                raise MeshFormatError(f"{kind} line expects {width} fields", number)
            try:
                rows.append([cast(t) for t in tokens])
            except ValueError:
                raise MeshFormatError(f"invalid {kind} entry", number) from None
        return rows

    nodes = np.array(numbers("nodes", 2, float), dtype=float).reshape(-1, 2)
    tri_rows = np.array(numbers("triangles", 4, int), dtype=np.int64).reshape(-1, 4)
    edge_rows = np.array(numbers("edges", 3, int), dtype=np.int64).reshape(-1, 3)

    region_table: Dict[int, RegionRole] = {}
    for number, tokens in sections["regions"]:
        try:
            rid = int(tokens[0])
            region_table[rid] = RegionRole.parse(tokens[1:])
        except ValueError as e:
            raise MeshFormatError(str(e), number) from None

    boundary_table: Dict[int, str] = {}
    for number, tokens in sections.get("boundaries", []):
        if len(tokens) != 2:
            raise MeshFormatError("boundary line expects: <tag> <role>", number)
        if tokens[1] not in BOUNDARY_ROLES:
            raise MeshFormatError(f"unknown boundary role {tokens[1]!r}", number)
        try:
            boundary_table[int(tokens[0])] = tokens[1]
        except ValueError:
            raise MeshFormatError(f"invalid boundary tag {tokens[0]!r}", number) from None

    triangles = tri_rows[:, :3].copy()
    if triangles.size and (triangles.min() < 0 or triangles.max() >= len(nodes)):
        raise MeshValidationError("triangle node index out of range")
    p = nodes[triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    clockwise = (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]) < 0.0
    triangles[clockwise] = triangles[clockwise][:, [0, 2, 1]]

    mesh = Mesh(nodes, triangles, tri_rows[:, 3], edge_rows[:, :2], edge_rows[:, 2],
                region_table, boundary_table, symmetry)
    mesh.validate()
    return mesh


def load_mesh(path: Union[str, Path]) -> Mesh:
    """Read and validate an `emsh 1` file."""
    path = Path(path)
    mesh = parse_mesh(path.read_text())
    logger.info(f"Loaded mesh {path}: {mesh.n_nodes} nodes, {mesh.n_triangles} triangles")
    return mesh


def format_mesh(mesh: Mesh) -> str:
    out = ["emsh 1"]
    if mesh.symmetry != "periodic":
        out.append(f"symmetry {mesh.symmetry}")
    out.append(f"nodes {mesh.n_nodes}")
    out.extend(f"{x:.17g} {y:.17g}" for x, y in mesh.nodes)
    out.append(f"triangles {mesh.n_triangles}")
    out.extend(f"{i} {j} {k} {r}" for (i, j, k), r in zip(mesh.triangles, mesh.tri_region))
    out.append(f"edges {len(mesh.edges)}")
    out.extend(f"{i} {j} {t}" for (i, j), t in zip(mesh.edges, mesh.edge_tag))
    out.append(f"regions {len(mesh.region_table)}")
    out.extend(f"{rid} {role.tokens()}" for rid, role in sorted(mesh.region_table.items()))
    out.append(f"boundaries {len(mesh.boundary_table)}")
    out.extend(f"{tag} {role}" for tag, role in sorted(mesh.boundary_table.items()))
    return "\n".join(out) + "\n"


def write_mesh(mesh: Mesh, path: Union[str, Path]) -> None:
    Path(path).write_text(format_mesh(mesh))
    logger.debug(f"Wrote mesh {path}")


# ---------------------------------------------------------------------------
# Interface rings and constraints
# ---------------------------------------------------------------------------

def _polar(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return np.hypot(points[:, 0], points[:, 1]), np.arctan2(points[:, 1], points[:, 0])


def _side_angle(mesh: Mesh) -> Optional[float]:
    """Angle from side periodic_a to side periodic_b, None for full models."""
    a = mesh.boundary_nodes("periodic_a")
    b = mesh.boundary_nodes("periodic_b")
    if a.size == 0 and b.size == 0:
        return None
    if a.size == 0 or b.size == 0:
        raise MeshValidationError("periodic sides incomplete", "both periodic_a and periodic_b are required")
    ra, ta = _polar(mesh.nodes[a])
    rb, tb = _polar(mesh.nodes[b])
    angle = (tb[np.argmax(rb)] - ta[np.argmax(ra)]) % (2.0 * np.pi)
    if angle == 0.0:
        angle = 2.0 * np.pi
    return float(angle)


def _order_ring(mesh: Mesh, ring: np.ndarray, start_angle: float) -> np.ndarray:
    _, theta = _polar(mesh.nodes[ring])
    rel = (theta - start_angle) % (2.0 * np.pi)
    rel[rel > 2.0 * np.pi - 1e-9] -= 2.0 * np.pi
    return ring[np.argsort(rel, kind="stable")]


def interface_rings(mesh: Mesh) -> Optional[InterfaceRings]:
    """Ordered interface rings, or None when the mesh has no sliding interface."""
    rotor = mesh.boundary_nodes("interface_rotor")
    stator = mesh.boundary_nodes("interface_stator")
    if rotor.size == 0 and stator.size == 0:
        return None
    if rotor.size != stator.size:
        raise MeshValidationError(
            "interface vertex counts differ", f"rotor {rotor.size}, stator {stator.size}")

    sector = _side_angle(mesh)
    is_sector = sector is not None
    if is_sector:
        a_nodes = set(mesh.boundary_nodes("periodic_a").tolist())
        starts = [n for n in rotor.tolist() if n in a_nodes]
        if len(starts) != 1:
            raise MeshValidationError("interface ring does not start on periodic_a")
        start_angle = float(_polar(mesh.nodes[[starts[0]]])[1][0])
    else:
        start_angle = 0.0

    ordered = []
    for ring in (rotor, stator):
        ordered.append(_order_ring(mesh, ring, start_angle))
    rotor_o, stator_o = ordered

    radius_r, _ = _polar(mesh.nodes[rotor_o])
    radius_s, _ = _polar(mesh.nodes[stator_o])
    radius = float(np.mean(radius_r))
    if (np.max(np.abs(radius_r - radius)) > RING_TOL * radius
            or np.max(np.abs(radius_s - radius)) > RING_TOL * radius):
        raise MeshValidationError("interface vertices not on a common circle")

    count = rotor.size - 1 if is_sector else rotor.size
    if count < 1:
        raise MeshValidationError("interface ring too short")
    total = sector if is_sector else 2.0 * np.pi
    spacing = total / count
    for ring in (rotor_o, stator_o):
        _, theta = _polar(mesh.nodes[ring])
        rel = (theta - start_angle) % (2.0 * np.pi)
        rel[rel > 2.0 * np.pi - 1e-9] -= 2.0 * np.pi
        expected = rel[0] + spacing * np.arange(ring.size)
        if np.max(np.abs(rel - expected)) > RING_TOL * spacing + 1e-12:
            raise MeshValidationError("interface vertices not equispaced in angle")

    return InterfaceRings(rotor_o, stator_o, int(count), float(total), radius, is_sector)


def _side_pairs(mesh: Mesh, angle: float) -> List[Tuple[int, int]]:
    a = mesh.boundary_nodes("periodic_a")
    b = mesh.boundary_nodes("periodic_b")
    if a.size != b.size:
        raise MeshValidationError("periodic sides do not match", f"{a.size} vs {b.size} nodes")
    c, s = np.cos(angle), np.sin(angle)
    rotated = mesh.nodes[a] @ np.array([[c, s], [-s, c]])
    dist, idx = cKDTree(mesh.nodes[b]).query(rotated)
    scale = float(np.max(np.abs(mesh.nodes))) or 1.0
    if dist.size and dist.max() > 1e-7 * scale:
        raise MeshValidationError("periodic sides do not match", f"offset {dist.max():.3e}")
    return [(int(na), int(b[j])) for na, j in zip(a, idx)]


class _SignedUnionFind:
    def __init__(self, n: int):
        self.parent = np.arange(n)
        self.sign = np.ones(n, dtype=np.int64)
        self.conflict = np.zeros(n, dtype=bool)

    def find(self, x: int) -> Tuple[int, int]:
        s = 1
        root = x
        while self.parent[root] != root:
            s *= int(self.sign[root])
            root = int(self.parent[root])
        node, acc = x, s
        while self.parent[node] != node:
            nxt = int(self.parent[node])
            nxt_sign = int(self.sign[node])
            self.parent[node] = root
            self.sign[node] = acc
            acc *= nxt_sign
            node = nxt
        return root, s

    def union(self, a: int, b: int, s: int) -> None:
        """Record u[b] = s * u[a]."""
        ra, sa = self.find(a)
        rb, sb = self.find(b)
        if ra == rb:
            if sb != s * sa:
                self.conflict[ra] = True
            return
        rel = s * sa * sb
        if ra < rb:
            self.parent[rb], self.sign[rb] = ra, rel
            self.conflict[ra] |= self.conflict[rb]
        else:
            self.parent[ra], self.sign[ra] = rb, rel
            self.conflict[rb] |= self.conflict[ra]


def build_constraints(mesh: Mesh, shift: int = 0) -> ConstraintMap:
    """
    Dirichlet set and signed identifications for a locked-step shift.

    Stator interface vertex i is identified with rotor vertex (i + shift) mod V.
    In antiperiodic sector models the sign flips once per wrap past the sector,
    so those maps repeat with period 2V; all others repeat with period V.
    """
    dirichlet = set(mesh.boundary_nodes("outer").tolist()) | set(mesh.boundary_nodes("shaft").tolist())
    links: List[Tuple[int, int, int]] = []

    antiperiodic = mesh.symmetry == "antiperiodic"
    angle = _side_angle(mesh)
    if angle is not None:
        side_sign = -1 if antiperiodic else 1
        links.extend((a, b, side_sign) for a, b in _side_pairs(mesh, angle))

    locked_shift, turns = 0, 0
    rings = interface_rings(mesh)
    if rings is not None:
        V = rings.count
        locked_shift, turns = shift % V, shift // V
        for i in range(V):
            wraps, r = divmod(i + shift, V)
            sign = -1 if (antiperiodic and rings.is_sector and wraps % 2) else 1
            links.append((int(rings.rotor[r]), int(rings.stator[i]), sign))

    uf = _SignedUnionFind(mesh.n_nodes)
    for a, b, s in links:
        uf.union(a, b, s)

    roots = np.empty(mesh.n_nodes, dtype=np.int64)
    signs = np.empty(mesh.n_nodes, dtype=np.int64)
    for node in range(mesh.n_nodes):
        roots[node], signs[node] = uf.find(node)

    fixed_roots = set(roots[list(dirichlet)].tolist()) if dirichlet else set()
    fixed_roots |= set(np.flatnonzero(uf.conflict).tolist())
    fixed_mask = np.isin(roots, list(fixed_roots))
    dirichlet_all = frozenset(np.flatnonzero(fixed_mask).tolist())

    pairs = tuple(
        (int(roots[n]), int(n), int(signs[n]))
        for n in range(mesh.n_nodes)
        if roots[n] != n and not fixed_mask[n]
    )
    return ConstraintMap(dirichlet_all, pairs, int(locked_shift), int(turns))


# ---------------------------------------------------------------------------
# Quality, advection, components, design space
# ---------------------------------------------------------------------------

def element_quality(mesh: Mesh) -> np.ndarray:
    """Signed quality q = 4*sqrt(3)*area / (l1^2 + l2^2 + l3^2) per triangle."""
    p = mesh.nodes[mesh.triangles]
    l2 = (np.sum((p[:, 1] - p[:, 0]) ** 2, axis=1)
          + np.sum((p[:, 2] - p[:, 1]) ** 2, axis=1)
          + np.sum((p[:, 0] - p[:, 2]) ** 2, axis=1))
    area = mesh.signed_areas()
    q = np.zeros_like(area)
    ok = l2 > 0.0
    q[ok] = 4.0 * np.sqrt(3.0) * area[ok] / l2[ok]
    return q


def quality(mesh: Mesh) -> QualityReport:
    q = element_quality(mesh)
    if q.size == 0:
        return QualityReport(1.0, -1, 0)
    worst = int(np.argmin(q))
    return QualityReport(float(q[worst]), worst, int(np.count_nonzero(q <= 0.0)))


def advect(mesh: Mesh, theta: np.ndarray, t: float) -> Mesh:
    """Move every node x to x + t * theta(x); connectivity and tags unchanged."""
    theta = np.asarray(theta, dtype=float).reshape(mesh.n_nodes, 2)
    return mesh.with_nodes(mesh.nodes + t * theta)


def magnet_components(mesh: Mesh) -> List[np.ndarray]:
    """Edge-connected components of the magnet triangles, sorted by first triangle."""
    magnets = np.flatnonzero(mesh.triangle_mask("magnet"))
    if magnets.size == 0:
        return []
    tris = np.sort(mesh.triangles[magnets], axis=1)
    local_edges = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [0, 2]]])
    owner = np.tile(np.arange(magnets.size), 3)
    keys = local_edges[:, 0] * mesh.n_nodes + local_edges[:, 1]
    order = np.argsort(keys, kind="stable")
    keys, owner = keys[order], owner[order]
    shared = np.flatnonzero(keys[1:] == keys[:-1])
    graph = coo_matrix(
        (np.ones(shared.size), (owner[shared], owner[shared + 1])),
        shape=(magnets.size, magnets.size),
    )
    n_comp, labels = connected_components(graph, directed=False)
    components = [np.sort(magnets[labels == c]) for c in range(n_comp)]
    components.sort(key=lambda comp: int(comp[0]))
    return components


def node_incidence(mesh: Mesh) -> Tuple[np.ndarray, np.ndarray]:
    """Per node: count of incident triangles and of incident design-region triangles."""
    all_count = np.bincount(mesh.triangles.ravel(), minlength=mesh.n_nodes)
    design = mesh.triangle_mask(tuple(DESIGN_ROLES))
    design_count = np.bincount(mesh.triangles[design].ravel(), minlength=mesh.n_nodes)
    return all_count, design_count


def design_mask(mesh: Mesh) -> np.ndarray:
    """
    Nodes the optimizer may move.

    A node is free when every incident triangle is rotor iron or rotor air and
    it lies on no tagged boundary; this pins magnet boundaries, the rotor outer
    boundary, the shaft, the periodic sides and the whole stator.
    """
    all_count, design_count = node_incidence(mesh)
    free = (all_count > 0) & (all_count == design_count)
    if mesh.edges.size:
        free[np.unique(mesh.edges.ravel())] = False
    return free
