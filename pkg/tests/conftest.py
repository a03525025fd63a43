from __future__ import annotations

import numpy as np
import pytest

from sessiongraph import geometry as geo
from sessiongraph.graph import Edge, EdgeKind, PoseGraph, Role, Vertex, VertexId


def random_pose(rng: np.random.Generator, max_angle: float = 3.0, scale: float = 5.0) -> geo.Pose:
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    phi = axis * rng.uniform(0.0, max_angle)
    return geo.Pose(geo.so3_exp(phi), rng.uniform(-scale, scale, 3))


def random_spd(rng: np.random.Generator, low: float = 0.5, high: float = 20.0) -> np.ndarray:
    Q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    return Q @ np.diag(rng.uniform(low, high, 6)) @ Q.T


def chain_graph(m: int, role: Role = Role.REFERENCE, session: int = 0) -> PoseGraph:
    """Straight chain 1 m apart with exact unit-information INTRA edges."""
    g = PoseGraph()
    for k in range(m):
        g.add_vertex(Vertex(VertexId(session, k), geo.Pose.from_xyz_yaw(k, 0.0), float(k), role))
    for k in range(m - 1):
        g.add_edge(Edge(VertexId(session, k), VertexId(session, k + 1), EdgeKind.INTRA,
                        geo.Pose.from_xyz_yaw(1.0, 0.0), np.eye(6)))
    return g


def graph_from_pairs(m: int, pairs, weights=None) -> PoseGraph:
    """Vertices (0, k); LOOP edges for ``pairs`` with isotropic information ``w * I``.

    Poses are arbitrary: only the structure matters for spectral tests.
    """
    g = PoseGraph()
    for k in range(m):
        g.add_vertex(Vertex(VertexId(0, k), geo.Pose.from_xyz_yaw(k, 0.0), 0.0, Role.REFERENCE))
    for n, (a, b) in enumerate(pairs):
        w = 1.0 if weights is None else weights[n]
        g.add_edge(Edge(VertexId(0, a), VertexId(0, b), EdgeKind.LOOP, geo.Pose.identity(),
                        w * np.eye(6)))
    return g


def random_pairs(rng: np.random.Generator, m: int, p: float) -> list[tuple[int, int]]:
    return [(a, b) for a in range(m) for b in range(a + 1, m) if rng.random() < p]


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


# Acceptance tests record one verdict line per criterion; they are echoed in the
# terminal summary so they show up without ``-s``.
CRITERIA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
