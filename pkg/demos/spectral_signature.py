"""Why the node degree alone is not enough.

Two 5-vertex graphs with the same edge count have the same average degree,
yet one is a ring and the other a path with a chord. The Fiedler value tells
them apart, and a graph split in two has Fiedler value exactly zero.

    python3 demos/spectral_signature.py
"""

from __future__ import annotations

import numpy as np

from sessiongraph import Edge, EdgeKind, Pose, PoseGraph, Role, Vertex, VertexId
from sessiongraph.spectral import spectral_report


def graph(pairs, m=5):
    g = PoseGraph()
    for k in range(m):
        g.add_vertex(Vertex(VertexId(0, k), Pose.from_xyz_yaw(k, 0), role=Role.REFERENCE))
    for a, b in pairs:
        g.add_edge(Edge(VertexId(0, a), VertexId(0, b), EdgeKind.LOOP, Pose.identity(), np.eye(6)))
    return g


chain = [(0, 1), (1, 2), (2, 3), (3, 4)]
cases = {
    "path + chord 1-3": chain + [(1, 3)],
    "ring (0-4 closed)": chain + [(0, 4)],
    "two pieces": [(0, 1), (1, 2), (0, 2), (3, 4)],
}
for name, pairs in cases.items():
    r = spectral_report(graph(pairs))
    weak = ", ".join(str(e) for e in r.weakest_edges) or "-"
    print(f"{name:18s} edges {len(pairs)}  d {r.d_bar:.3f}  lambda2 {r.lambda2_bar:.4f}  weakest edge ids {weak}")
