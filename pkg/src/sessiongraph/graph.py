"""Pose-graph data model: session-scoped vertex ids, roles and typed edges."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, NamedTuple

import numpy as np

from .geometry import Pose


class GraphError(Exception):
    pass


class DuplicateId(GraphError):
    pass


class MissingEndpoint(GraphError):
    pass


class UnknownId(GraphError):
    pass


class KindViolation(GraphError):
    pass


class NonSpdInformation(GraphError):
    pass


class VertexId(NamedTuple):
    session: int
    index: int

    def __str__(self) -> str:
        return f"{self.session}:{self.index}"


class Role(enum.Enum):
    ACTIVE = "ACTIVE"
    RETAINED = "RETAINED"
    REFERENCE = "REFERENCE"


class EdgeKind(enum.Enum):
    INTRA = "INTRA"
    INTER = "INTER"
    LOOP = "LOOP"
    PRIOR = "PRIOR"


_ALLOWED_ROLE_CHANGES = {
    (Role.ACTIVE, Role.RETAINED),
    (Role.RETAINED, Role.REFERENCE),
}

SYMMETRY_TOL = 1e-9


def check_information(info: np.ndarray) -> np.ndarray:
    """Validate a 6x6 information matrix; returns it as a read-only float array."""
    info = np.array(info, dtype=float)
    if info.shape != (6, 6) or not np.all(np.isfinite(info)):
        raise NonSpdInformation(f"information must be a finite 6x6 matrix, got shape {info.shape}")
    if np.max(np.abs(info - info.T)) > SYMMETRY_TOL * max(1.0, np.max(np.abs(info))):
        raise NonSpdInformation("information matrix is not symmetric")
    info = 0.5 * (info + info.T)
    if np.linalg.eigvalsh(info)[0] <= 0.0:
        raise NonSpdInformation("information matrix is not positive definite")
    info.flags.writeable = False
    return info


@dataclass
class Vertex:
    id: VertexId
    pose: Pose
    timestamp: float = 0.0
    role: Role = Role.ACTIVE
    truth: Pose | None = None


@dataclass(eq=False)
class Edge:
    source: VertexId
    target: VertexId
    kind: EdgeKind
    measurement: Pose
    information: np.ndarray

    @cached_property
    def trace_weight(self) -> float:
        return float(np.trace(self.information))

    @cached_property
    def min_eig_weight(self) -> float:
        return float(np.linalg.eigvalsh(self.information)[0])

    @property
    def is_unary(self) -> bool:
        return self.kind is EdgeKind.PRIOR

    def other(self, vid: VertexId) -> VertexId:
        return self.target if vid == self.source else self.source


@dataclass
class PoseGraph:
    """Vertices keyed by :class:`VertexId`, edges keyed by integer edge ids.

    ``adjacency`` maps each vertex to the ids of its incident edges (PRIOR edges
    included). Edge ids are never reused.
    """

    vertices: dict[VertexId, Vertex] = field(default_factory=dict)
    edges: dict[int, Edge] = field(default_factory=dict)
    adjacency: dict[VertexId, set[int]] = field(default_factory=dict)
    next_edge_id: int = 0

    def __len__(self) -> int:
        return len(self.vertices)

    def __contains__(self, vid) -> bool:
        return vid in self.vertices

    # -- mutation -------------------------------------------------------

    def add_vertex(self, vertex: Vertex) -> VertexId:
        if vertex.id in self.vertices:
            raise DuplicateId(f"vertex {vertex.id} already present")
        vid = VertexId(*vertex.id)
        vertex.id = vid
        self.vertices[vid] = vertex
        self.adjacency[vid] = set()
        return vid

    def add_edge(self, edge: Edge, *, edge_id: int | None = None, check_roles: bool = True) -> int:
        """Insert ``edge``. ``check_roles=False`` keeps the structural kind rules
        but skips role rules; used when loading graphs whose INTER edges were
        merged into the reference."""
        for vid in (edge.source, edge.target):
            if vid not in self.vertices:
                raise MissingEndpoint(f"edge endpoint {vid} not in graph")
        edge.source = VertexId(*edge.source)
        edge.target = VertexId(*edge.target)
        self._check_kind(edge, check_roles)
        edge.information = check_information(edge.information)
        if edge_id is None:
            edge_id = self.next_edge_id
        elif edge_id in self.edges:
            raise DuplicateId(f"edge id {edge_id} already present")
        self.next_edge_id = max(self.next_edge_id, edge_id + 1)
        self.edges[edge_id] = edge
        self.adjacency[edge.source].add(edge_id)
        self.adjacency[edge.target].add(edge_id)
        return edge_id

    def _check_kind(self, edge: Edge, check_roles: bool = True) -> None:
        a, b = edge.source, edge.target
        if edge.kind is EdgeKind.PRIOR:
            if a != b:
                raise KindViolation("PRIOR edges are unary (source == target)")
            return
        if a == b:
            raise KindViolation(f"{edge.kind.value} edge may not be a self-loop")
        ra, rb = self.vertices[a].role, self.vertices[b].role
        if edge.kind is EdgeKind.INTRA:
            if a.session != b.session or b.index != a.index + 1:
                raise KindViolation(f"INTRA edge must join consecutive keyframes, got {a} -> {b}")
        elif not check_roles:
            return
        elif edge.kind is EdgeKind.INTER:
            if ra is Role.REFERENCE or rb is not Role.REFERENCE:
                raise KindViolation("INTER edge must join an active/retained vertex to a REFERENCE vertex")
        elif edge.kind is EdgeKind.LOOP:
            # Pending candidates (RETAINED) may receive loop edges so they can attach.
            if Role.ACTIVE in (ra, rb):
                raise KindViolation("LOOP edge endpoints must be REFERENCE (or pending candidate) vertices")

    def remove_edge(self, edge_id: int) -> Edge:
        edge = self.edges.pop(edge_id)
        self.adjacency[edge.source].discard(edge_id)
        self.adjacency[edge.target].discard(edge_id)
        return edge

    def remove_vertex(self, vid: VertexId) -> Vertex:
        if vid not in self.vertices:
            raise UnknownId(f"vertex {vid} not in graph")
        for eid in sorted(self.adjacency[vid]):
            self.remove_edge(eid)
        del self.adjacency[vid]
        return self.vertices.pop(vid)

    def set_role(self, vid: VertexId, role: Role) -> None:
        v = self.vertices[vid]
        if v.role is role:
            return
        if (v.role, role) not in _ALLOWED_ROLE_CHANGES:
            raise KindViolation(f"role change {v.role.value} -> {role.value} not allowed")
        v.role = role

    def set_pose(self, vid: VertexId, pose: Pose) -> None:
        self.vertices[vid].pose = pose

    # -- queries --------------------------------------------------------

    def incident(self, vid: VertexId, kinds: Iterable[EdgeKind] | None = None) -> list[int]:
        eids = sorted(self.adjacency[vid])
        if kinds is None:
            return eids
        kinds = set(kinds)
        return [e for e in eids if self.edges[e].kind in kinds]

    def neighbors(self, vid: VertexId, kinds: Iterable[EdgeKind] | None = None) -> list[VertexId]:
        out = {self.edges[e].other(vid) for e in self.incident(vid, kinds) if not self.edges[e].is_unary}
        return sorted(out)

    def ids_with_role(self, role: Role) -> list[VertexId]:
        return sorted(vid for vid, v in self.vertices.items() if v.role is role)

    def poses(self) -> dict[VertexId, Pose]:
        return {vid: v.pose for vid, v in self.vertices.items()}

    def rebuild_adjacency(self) -> dict[VertexId, set[int]]:
        adj: dict[VertexId, set[int]] = {vid: set() for vid in self.vertices}
        for eid, e in self.edges.items():
            adj[e.source].add(eid)
            adj[e.target].add(eid)
        return adj

    def check_invariants(self) -> None:
        for eid, e in self.edges.items():
            if e.source not in self.vertices or e.target not in self.vertices:
                raise MissingEndpoint(f"edge {eid} has a dangling endpoint")
        if self.rebuild_adjacency() != self.adjacency:
            raise GraphError("adjacency is inconsistent with the edge table")

    def copy(self) -> PoseGraph:
        """Snapshot: vertices and edges are copied, poses/information shared (immutable)."""
        return PoseGraph(
            vertices={vid: replace(v) for vid, v in self.vertices.items()},
            edges=dict(self.edges),
            adjacency={vid: set(s) for vid, s in self.adjacency.items()},
            next_edge_id=self.next_edge_id,
        )

    def without_truth(self) -> PoseGraph:
        g = self.copy()
        for v in g.vertices.values():
            v.truth = None
        return g


def subgraph(g: PoseGraph, ids: Iterable[VertexId]) -> PoseGraph:
    """Induced subgraph; PRIOR edges are kept when their vertex is kept.

    Edge ids are preserved so edges can be traced back to ``g``.
    """
    keep = set(ids)
    unknown = keep - g.vertices.keys()
    if unknown:
        raise UnknownId(f"unknown vertex ids: {sorted(unknown)[:5]}")
    out = PoseGraph(next_edge_id=g.next_edge_id)
    for vid in sorted(keep):
        out.vertices[vid] = replace(g.vertices[vid])
        out.adjacency[vid] = set()
    for eid, e in g.edges.items():
        if e.source in keep and e.target in keep:
            out.edges[eid] = e
            out.adjacency[e.source].add(eid)
            out.adjacency[e.target].add(eid)
    return out


def graph_distance(g: PoseGraph, a: VertexId, b: VertexId) -> int | None:
    """Unweighted hop count between ``a`` and ``b``; ``None`` if unreachable."""
    for vid in (a, b):
        if vid not in g.vertices:
            raise UnknownId(f"vertex {vid} not in graph")
    if a == b:
        return 0
    return bfs_distances(g, a).get(b)


def bfs_distances(g: PoseGraph, start: VertexId, kinds: Iterable[EdgeKind] | None = None,
                  within: set[VertexId] | None = None, limit: int | None = None) -> dict[VertexId, int]:
    """Hop distances from ``start``; optionally restricted to edge kinds / a vertex set."""
    kinds = None if kinds is None else set(kinds)
    dist = {start: 0}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        if limit is not None and dist[u] >= limit:
            continue
        for eid in sorted(g.adjacency[u]):
            e = g.edges[eid]
            if e.is_unary or (kinds is not None and e.kind not in kinds):
                continue
            w = e.other(u)
            if w in dist or (within is not None and w not in within):
                continue
            dist[w] = dist[u] + 1
            queue.append(w)
    return dist


def connected_components(g: PoseGraph, ids: Iterable[VertexId] | None = None,
                         kinds: Iterable[EdgeKind] | None = None) -> list[list[VertexId]]:
    """Components of the subgraph induced by ``ids`` (default: all vertices)."""
    pool = set(g.vertices) if ids is None else set(ids)
    seen: set[VertexId] = set()
    comps = []
    for vid in sorted(pool):
        if vid in seen:
            continue
        comp = bfs_distances(g, vid, kinds=kinds, within=pool)
        seen.update(comp)
        comps.append(sorted(comp))
    return comps
