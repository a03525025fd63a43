"""Weighted graph Laplacians and the connectivity indices derived from them.

Edges are weighted by a scalar summary of their information matrix: 1
(``UNIT``), its trace (``FIM_TRACE``, a T-optimality proxy) or its smallest
eigenvalue (``FIM_MIN_EIG``, an E-optimality proxy). PRIOR edges are gauge
devices, not observations between poses, and never enter a Laplacian.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .graph import Edge, PoseGraph, VertexId

EPS_CONN = 1e-8
DENSE_EIGEN_LIMIT = 2000
INVERSE_ITERATION_TOL = 1e-10
INVERSE_ITERATION_MAXITER = 500


class SpectralError(Exception):
    pass


class EmptyVertexSet(SpectralError):
    pass


class TooFewVertices(SpectralError):
    pass


class Disconnected(SpectralError):
    pass


class Weighting(enum.Enum):
    UNIT = "unit"
    FIM_TRACE = "trace"
    FIM_MIN_EIG = "mineig"


def edge_weight(edge: Edge, weighting: Weighting) -> float:
    if edge.is_unary:
        raise ValueError("PRIOR edges carry no Laplacian weight")
    if weighting is Weighting.UNIT:
        return 1.0
    if weighting is Weighting.FIM_TRACE:
        return edge.trace_weight
    return edge.min_eig_weight


@dataclass
class WeightedLaplacian:
    matrix: sp.csr_matrix
    order: list[VertexId]
    weighting: Weighting
    # (edge id, row, col, weight) for every edge that contributed
    edges: list[tuple[int, int, int, float]] = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.order)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def laplacian_from_edges(m: int, edges: Iterable[tuple[int, int, float]]) -> sp.csr_matrix:
    """Sparse Laplacian of ``m`` vertices from ``(u, v, w)`` triples; parallel edges add up."""
    edges = list(edges)
    if not edges:
        return sp.csr_matrix((m, m))
    u, v, w = (np.array(x) for x in zip(*edges))
    u = u.astype(int)
    v = v.astype(int)
    w = w.astype(float)
    rows = np.concatenate([u, v, u, v])
    cols = np.concatenate([u, v, v, u])
    vals = np.concatenate([w, w, -w, -w])
    return sp.coo_matrix((vals, (rows, cols)), shape=(m, m)).tocsr()


def build_laplacian(g: PoseGraph, vertex_set: Iterable[VertexId] | None = None,
                    weighting: Weighting = Weighting.UNIT) -> WeightedLaplacian:
    order = sorted(g.vertices if vertex_set is None else set(vertex_set))
    if not order:
        raise EmptyVertexSet("Laplacian needs at least one vertex")
    index = {vid: k for k, vid in enumerate(order)}
    triples = []
    seen: set[int] = set()
    for vid in order:
        for eid in g.adjacency[vid]:
            if eid in seen:
                continue
            seen.add(eid)
            e = g.edges[eid]
            if e.is_unary or e.source not in index or e.target not in index:
                continue
            triples.append((eid, index[e.source], index[e.target], edge_weight(e, weighting)))
    triples.sort()
    L = laplacian_from_edges(len(order), ((i, j, w) for _, i, j, w in triples))
    return WeightedLaplacian(L, order, weighting, triples)


def average_node_degree(L: WeightedLaplacian) -> float:
    """Mean of the nonzero Laplacian spectrum, i.e. trace(L) / m."""
    return float(L.matrix.diagonal().sum()) / L.m


def node_degrees(L: WeightedLaplacian) -> dict[VertexId, float]:
    diag = L.matrix.diagonal()
    return {vid: float(diag[k]) for k, vid in enumerate(L.order)}


def _connectivity_scale(L: WeightedLaplacian) -> float:
    diag = L.matrix.diagonal()
    return float(diag.max()) if diag.size else 0.0


def fiedler(L: WeightedLaplacian) -> tuple[float, np.ndarray]:
    """Second-smallest eigenvalue and a unit eigenvector orthogonal to ones.

    The eigenvalue is clamped to 0 when, relative to the largest weighted
    degree, it is below ``EPS_CONN``.
    """
    m = L.m
    if m < 2:
        raise TooFewVertices("Fiedler value needs at least two vertices")
    scale = _connectivity_scale(L)
    if scale == 0.0:
        vec = np.zeros(m)
        vec[0], vec[1] = 1.0, -1.0
        return 0.0, vec / np.sqrt(2.0)
    if m <= DENSE_EIGEN_LIMIT:
        vals, vecs = scipy.linalg.eigh(L.dense() / scale, subset_by_index=[0, 1])
    else:
        # Shift below zero so the singular Laplacian factorizes.
        vals, vecs = spla.eigsh(L.matrix.tocsc() / scale, k=2, sigma=-1e-3, which="LM",
                                tol=INVERSE_ITERATION_TOL, maxiter=INVERSE_ITERATION_MAXITER)
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
    lam = float(vals[1])
    vec = vecs[:, 1] - vecs[:, 1].mean()
    norm = np.linalg.norm(vec)
    vec = vec / norm if norm > 0 else vecs[:, 1]
    if lam < EPS_CONN:
        return 0.0, vec
    return lam * scale, vec


def algebraic_connectivity(L: WeightedLaplacian) -> float:
    return fiedler(L)[0]


def _bisection(vec: np.ndarray) -> np.ndarray:
    """Side of each vertex by Fiedler sign; near-zero entries join the smaller side."""
    tol = 1e-9 * max(float(np.max(np.abs(vec))), 1e-300)
    side = np.zeros(vec.size, dtype=int)
    side[vec > tol] = 1
    side[vec < -tol] = -1
    for k in np.flatnonzero(side == 0):
        side[k] = 1 if np.sum(side == 1) <= np.sum(side == -1) else -1
    return side


def weakest_edges(g: PoseGraph, L: WeightedLaplacian) -> list[int]:
    """Edge ids cut by the spectral bisection of a connected graph."""
    lam, vec = fiedler(L)
    if lam <= 0.0:
        raise Disconnected("weakest edges are only defined for a connected graph")
    side = _bisection(vec)
    cut = {eid for eid, i, j, _ in L.edges if side[i] != side[j]}
    return sorted(cut)


def spanning_tree_measure(L: WeightedLaplacian) -> float:
    """Weighted spanning-tree count normalized per vertex:
    ``exp(logdet(reduced L) / (m - 1))``."""
    if L.m < 2:
        raise TooFewVertices("spanning trees need at least two vertices")
    lam, _ = fiedler(L)
    if lam <= 0.0:
        raise Disconnected("graph is disconnected; it has no spanning tree")
    sign, logdet = np.linalg.slogdet(L.dense()[1:, 1:])
    if sign <= 0:
        raise Disconnected("reduced Laplacian is not positive definite")
    return float(np.exp(logdet / (L.m - 1)))


@dataclass
class SpectralReport:
    m: int
    d_bar: float
    lambda2_bar: float
    fiedler_vector: np.ndarray | None
    spanning_tree_log: float | None
    node_degrees: dict[VertexId, float]
    weakest_edges: list[int]
    weighting: Weighting

    @property
    def spanning_tree(self) -> float | None:
        return None if self.spanning_tree_log is None else float(np.exp(self.spanning_tree_log))


def spectral_report(g: PoseGraph, vertex_set: Iterable[VertexId] | None = None,
                    weighting: Weighting = Weighting.UNIT) -> SpectralReport:
    L = build_laplacian(g, vertex_set, weighting)
    d_bar = average_node_degree(L)
    lam, vec, tree_log, weak = 0.0, None, None, []
    if L.m >= 2:
        lam, vec = fiedler(L)
        if lam > 0.0:
            tree_log = float(np.log(spanning_tree_measure(L)))
            weak = weakest_edges(g, L)
    return SpectralReport(L.m, d_bar, lam, vec, tree_log, node_degrees(L), weak, weighting)
