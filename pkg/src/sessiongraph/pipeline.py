"""Multi-session localization and mapping against a prior pose graph.

Each keyframe is localized against the reference graph with the reference
held fixed. The weighted degree of the newest keyframes and, when it deviates,
the Fiedler value of the joint (active + reference) graph drive the decision
module. While mapping, keyframes that leave the window without a reference
match are merged into the reference, a loop-closure search runs over them and
the whole graph is re-optimized.
"""

from __future__ import annotations

import logging
import math
import time
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Protocol

import numpy as np

from . import decision as dec
from .decision import DecisionConfig, DecisionState, Event, Mode
from .geometry import Pose
from .graph import (Edge, EdgeKind, PoseGraph, Role, Vertex, VertexId, bfs_distances,
                    connected_components, subgraph)
from .optimizer import (Convergence, GaugeFailure, Termination, build_problem, edge_jacobians,
                        mapping_problem, marginal_covariances, optimize)
from .spectral import Weighting, build_laplacian, fiedler

log = logging.getLogger(__name__)

Measurement = tuple[Pose, np.ndarray]


class Matcher(Protocol):
    """Source of relative-pose measurements between two keyframes.

    Both methods return ``(T_a^-1 T_b, information)`` or ``None`` when no
    match is found.
    """

    def match_to_reference(self, query: Vertex, reference: Vertex) -> Measurement | None: ...

    def match_pair(self, a: Vertex, b: Vertex) -> Measurement | None: ...


@dataclass(frozen=True)
class PipelineConfig:
    window_size: int = 10
    k_neighbors: int = 2
    retention_age: int = 100
    retention_distance: int = 50
    association_radius: float = 10.0
    lc_radius: float = 15.0
    lc_min_separation: int = 20
    lc_gate: float = 12.59
    lc_max_candidates: int = 3
    degree_horizon: int = 5
    start_prior_sigma: tuple[float, float] = (1.0, 0.1)
    bootstrap_prior_information: float = 1e6
    decision_enabled: bool = True
    deterministic: bool = True
    decision: DecisionConfig = field(default_factory=DecisionConfig)
    window_convergence: Convergence = field(default_factory=lambda: Convergence(max_iterations=20))

    def __post_init__(self) -> None:
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")
        if self.association_radius <= 0 or self.lc_radius <= 0:
            raise ValueError("radii must be positive")
        if self.retention_age <= self.window_size or self.retention_distance <= self.window_size:
            raise ValueError("retention limits must exceed the window size")
        if not 1 <= self.degree_horizon <= self.window_size:
            raise ValueError("degree_horizon must lie in [1, window_size]")


@dataclass
class KeyframeEvent:
    session: int
    index: int
    timestamp: float
    odometry: Pose | None = None  # relative to the previous keyframe; None for the first
    information: np.ndarray | None = None
    truth: Pose | None = None


@dataclass
class SessionStream:
    session: int
    label: str
    initial_pose: Pose
    events: list[KeyframeEvent]


@dataclass
class MetricsRow:
    keyframe: int
    session: int
    mode: Mode
    d_bar: float
    lambda2: float | None
    mu: float
    sigma: float
    event: Event
    wall_ms: float
    inter_edges: int = 0
    reference_size: int = 0


def _lc_separated(a: VertexId, b: VertexId, min_separation: int) -> bool:
    return a.session != b.session or abs(a.index - b.index) >= min_separation


def loop_closure_search(snapshot: PoseGraph, queries: Iterable[VertexId], matcher: Matcher,
                        config: PipelineConfig) -> list[Edge]:
    """Propose LOOP edges for ``queries`` against the reference in ``snapshot``.

    A proposal is kept when its residual, whitened by the measurement noise
    plus the marginal covariance of the two poses, passes ``config.lc_gate``.
    Pure function of the snapshot; safe to run on a worker thread.
    """
    reference = snapshot.ids_with_role(Role.REFERENCE)
    if len(reference) < 2:
        return []
    ref_index = {vid: k for k, vid in enumerate(reference)}
    positions = np.stack([snapshot.vertices[v].pose.translation for v in reference])
    proposals: list[Edge] = []
    for q in sorted(set(queries)):
        if q not in ref_index:
            continue
        vq = snapshot.vertices[q]
        linked = set(snapshot.neighbors(q))
        d = np.linalg.norm(positions - vq.pose.translation, axis=1)
        order = np.argsort(d, kind="stable")
        picked = 0
        for k in order:
            if d[k] > config.lc_radius or picked >= config.lc_max_candidates:
                break
            t = reference[k]
            if t == q or t in linked or not _lc_separated(q, t, config.lc_min_separation):
                continue
            picked += 1
            m = matcher.match_pair(vq, snapshot.vertices[t])
            if m is not None:
                proposals.append(Edge(q, t, EdgeKind.LOOP, m[0], np.asarray(m[1], dtype=float)))
    if not proposals:
        return []
    problem = mapping_problem(snapshot, [], reference)
    involved = sorted({v for e in proposals for v in (e.source, e.target)})
    marg = marginal_covariances(problem, involved)
    idx, cov = marg["index"], marg["cov"]
    poses = snapshot.poses()
    accepted = []
    for e in proposals:
        r, Ja, Jb = edge_jacobians(e, poses)
        ia, ib = idx[e.source], idx[e.target]
        sel = np.r_[6 * ia: 6 * ia + 6, 6 * ib: 6 * ib + 6]
        J = np.hstack([Ja, Jb])
        S = J @ cov[np.ix_(sel, sel)] @ J.T + np.linalg.inv(e.information)
        chi2 = float(r @ np.linalg.solve(S, r))
        if chi2 <= config.lc_gate:
            accepted.append(e)
    return accepted


class Pipeline:
    """Owner of the pose graph; processes keyframes one at a time.

    ``graph`` may hold a prior model; its vertices must all be REFERENCE.
    """

    def __init__(self, config: PipelineConfig | None = None, matcher: Matcher | None = None,
                 graph: PoseGraph | None = None) -> None:
        self.config = config or PipelineConfig()
        self.matcher = matcher
        self.graph = graph if graph is not None else PoseGraph()
        if any(v.role is not Role.REFERENCE for v in self.graph.vertices.values()):
            raise ValueError("a prior model may only contain REFERENCE vertices")
        self.reference: set[VertexId] = set(self.graph.vertices)
        self.active: deque[VertexId] = deque()
        self.retained: list[VertexId] = []
        self.candidates: set[VertexId] = set()
        self.covered: set[VertexId] = set()
        self.decision = DecisionState()
        self.rows: list[MetricsRow] = []
        self.eigensolves = 0
        self.global_optimizations = 0
        self.committed_loops: list[Edge] = []
        self.merged: dict[int, list[VertexId]] = {}
        self.session: int | None = None
        self.bootstrap = False
        self._lc_queue: list[VertexId] = []
        self._lc_active = False
        self._episode: list[VertexId] = []
        self._removed: dict[VertexId, tuple[Pose, Pose | None]] = {}
        self._ref_cache: tuple[list[VertexId], np.ndarray] | None = None
        self._executor: ThreadPoolExecutor | None = None
        self._pending: list[Future] = []

    # ------------------------------------------------------------ sessions

    @property
    def mode(self) -> Mode:
        return self.decision.mode

    def begin_session(self, session: int, initial_pose: Pose) -> None:
        if self.session is not None:
            raise RuntimeError("end the current session first")
        self.session = session
        self.bootstrap = not self.reference
        self.decision = DecisionState.forced_mapping() if self.bootstrap else DecisionState()
        self._lc_active = self.bootstrap
        self._episode = []
        self._initial_pose = initial_pose
        self.merged.setdefault(session, [])

    def run_session(self, stream: SessionStream) -> list[MetricsRow]:
        self.begin_session(stream.session, stream.initial_pose)
        rows = [self.ingest(ev) for ev in stream.events]
        self.end_session()
        return rows

    def end_session(self) -> None:
        self._drain_worker()
        if self.mode is Mode.MAPPING:
            for vid in list(self.active):
                self._retire(vid, mapping=True)
            self.merge_candidates()
            self._run_loop_closure(sync=True)
            self.global_optimize()
        else:
            for vid in list(self.active):
                self._retire(vid, mapping=False)
        for vid in list(self.retained):
            self._drop(vid)
        self.candidates.clear()
        self.session = None
        self._lc_active = False
        self._lc_queue = []

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    # -------------------------------------------------------------- ingest

    def ingest(self, event: KeyframeEvent) -> MetricsRow:
        if self.session is None:
            raise RuntimeError("begin_session must be called before ingest")
        if event.session != self.session:
            raise ValueError(f"event for session {event.session} during session {self.session}")
        t0 = time.perf_counter()
        self._commit_worker_results()
        vid = self._add_keyframe(event)
        n_inter = self._associate(vid)
        self._optimize_window()
        self._slide_window()

        lam_lazy = dec.LazyValue(self.joint_lambda2)
        d_bar = self.local_degree()
        if self.bootstrap or self.config.decision_enabled:
            res = dec.step(self.decision, self.config.decision, d_bar, lam_lazy)
            event_out, lam, mu, sigma = res.event, res.lambda2, res.mu, res.sigma
        else:
            event_out, lam, mu, sigma = Event.NONE, None, math.nan, math.nan
        if event_out.enters_mapping:
            self._enter_mapping()
        elif event_out is Event.EXIT_MAPPING:
            self._exit_mapping()
        if self._lc_active:
            self._run_loop_closure(sync=self.config.deterministic)
        row = MetricsRow(
            keyframe=event.index, session=event.session, mode=self.mode, d_bar=d_bar,
            lambda2=lam, mu=mu, sigma=sigma, event=event_out,
            wall_ms=1e3 * (time.perf_counter() - t0), inter_edges=n_inter,
            reference_size=len(self.reference),
        )
        self.rows.append(row)
        return row

    def _add_keyframe(self, event: KeyframeEvent) -> VertexId:
        vid = VertexId(event.session, event.index)
        if self.active:
            prev = self.active[-1]
            if prev.index + 1 != event.index:
                raise ValueError(f"keyframe {vid} does not follow {prev}")
            if event.odometry is None or event.information is None:
                raise ValueError(f"keyframe {vid} lacks odometry")
            pose = self.graph.vertices[prev].pose @ event.odometry
            self.graph.add_vertex(Vertex(vid, pose, event.timestamp, Role.ACTIVE, event.truth))
            self.graph.add_edge(Edge(prev, vid, EdgeKind.INTRA, event.odometry, event.information))
        else:
            pose = self._initial_pose
            self.graph.add_vertex(Vertex(vid, pose, event.timestamp, Role.ACTIVE, event.truth))
            if self.bootstrap:
                info = self.config.bootstrap_prior_information * np.eye(6)
            else:
                st, sr = self.config.start_prior_sigma
                info = np.diag([st ** -2] * 3 + [sr ** -2] * 3)
            self.graph.add_edge(Edge(vid, vid, EdgeKind.PRIOR, pose, info))
        self.active.append(vid)
        return vid

    def _reference_positions(self) -> tuple[list[VertexId], np.ndarray]:
        if self._ref_cache is None:
            ids = sorted(self.reference)
            pos = (np.stack([self.graph.vertices[v].pose.translation for v in ids])
                   if ids else np.zeros((0, 3)))
            self._ref_cache = (ids, pos)
        return self._ref_cache

    def _associate(self, vid: VertexId) -> int:
        """INTER edges from ``vid`` to the nearest reference vertex and its k graph neighbors.

        A failed match falls through to the next reference vertex within
        ``association_radius`` (nearest first), so a keyframe inside mapped
        territory gets k + 1 edges regardless of individual match failures.
        """
        # A bootstrap session has no prior map; its revisits are loop closures.
        if self.bootstrap or not self.reference or self.matcher is None:
            return 0
        cfg = self.config
        ids, pos = self._reference_positions()
        d = np.linalg.norm(pos - self.graph.vertices[vid].pose.translation, axis=1)
        order = np.argsort(d, kind="stable")
        nearby = [ids[k] for k in order[: int(np.searchsorted(d[order], cfg.association_radius, "right"))]
                  if self._may_associate(vid, ids[k])]
        if not nearby:
            return 0
        hit = nearby[0]
        dist = bfs_distances(self.graph, hit, kinds=(EdgeKind.INTRA, EdgeKind.LOOP),
                             within=self.reference, limit=cfg.k_neighbors)
        neighbors = sorted((h, v) for v, h in dist.items() if v != hit and self._may_associate(vid, v))
        targets = list(dict.fromkeys([hit] + [v for _, v in neighbors[: cfg.k_neighbors]] + nearby))
        query = self.graph.vertices[vid]
        added = 0
        for r in targets:
            if added > cfg.k_neighbors:
                break
            m = self.matcher.match_to_reference(query, self.graph.vertices[r])
            if m is None:
                continue
            self.graph.add_edge(Edge(vid, r, EdgeKind.INTER, m[0], np.asarray(m[1], dtype=float)))
            added += 1
        if added:
            self.covered.add(vid)
        return added

    def _may_associate(self, vid: VertexId, ref: VertexId) -> bool:
        # Recently merged keyframes of this session are odometry, not a prior map.
        return ref.session != vid.session or vid.index - ref.index >= self.config.lc_min_separation

    def _optimize_window(self) -> None:
        free = set(self.active)
        if self.mode is Mode.MAPPING:
            free.update(self._episode[-self.config.window_size:])
        problem = build_problem(self.graph, free, convergence=self.config.window_convergence)
        result = optimize(problem)
        if result.termination is Termination.GAUGE_FAILURE:
            raise GaugeFailure(f"window optimization has an unanchored component near {self.active[-1]}")
        self._apply(result.poses)

    def _apply(self, poses: dict[VertexId, Pose]) -> None:
        for vid, pose in poses.items():
            self.graph.set_pose(vid, pose)
        if any(v in self.reference for v in poses):
            self._ref_cache = None

    # -------------------------------------------------------------- window

    def is_candidate(self, vid: VertexId) -> bool:
        """Keyframes without a reference match, and their immediate neighbors."""
        if self.bootstrap or vid not in self.covered:
            return True
        for n in self.graph.neighbors(vid, (EdgeKind.INTRA,)):
            if n not in self.covered:
                return True
        return False

    def _retire(self, vid: VertexId, mapping: bool) -> None:
        self.active.remove(vid)
        self.graph.set_role(vid, Role.RETAINED)
        self.retained.append(vid)
        if mapping and self.is_candidate(vid):
            self.candidates.add(vid)

    def _drop(self, vid: VertexId) -> None:
        v = self.graph.remove_vertex(vid)
        self._removed[vid] = (v.pose, v.truth)
        self.retained.remove(vid)
        self.candidates.discard(vid)
        self.covered.discard(vid)

    def _slide_window(self) -> None:
        mapping = self.mode is Mode.MAPPING
        while len(self.active) > self.config.window_size:
            self._retire(self.active[0], mapping)
        if mapping:
            self.merge_candidates()
        else:
            self._prune()

    def _prune(self) -> None:
        if not self.retained:
            return
        newest = self.active[-1]
        cfg = self.config
        dist = bfs_distances(self.graph, newest, limit=cfg.retention_distance)
        for vid in list(self.retained):
            too_old = vid.session == newest.session and newest.index - vid.index > cfg.retention_age
            too_far = dist.get(vid, math.inf) > cfg.retention_distance
            if too_old or too_far:
                self._drop(vid)

    def merge_candidates(self) -> int:
        """Promote candidate components that touch the reference (or start it)."""
        if not self.candidates:
            return 0
        merged = 0
        for comp in connected_components(self.graph, self.candidates):
            attached = not self.reference
            if not attached:
                for vid in comp:
                    if any(self.graph.edges[e].other(vid) in self.reference
                           for e in self.graph.adjacency[vid] if not self.graph.edges[e].is_unary):
                        attached = True
                        break
            if not attached:
                continue
            for vid in comp:
                self.graph.set_role(vid, Role.REFERENCE)
                self.reference.add(vid)
                self.candidates.discard(vid)
                self.retained.remove(vid)
                self._episode.append(vid)
                self._lc_queue.append(vid)
                self.merged.setdefault(vid.session, []).append(vid)
                merged += 1
        if merged:
            self._ref_cache = None
        return merged

    # ------------------------------------------------------------- modes

    def _enter_mapping(self) -> None:
        """Candidate graph = the trailing run of retained keyframes that need mapping."""
        for vid in sorted(self.retained, reverse=True):
            if vid.session != self.session or not self.is_candidate(vid):
                break
            self.candidates.add(vid)
        self._episode = []
        self.merge_candidates()
        self._lc_active = True

    def _exit_mapping(self) -> None:
        active = list(self.active)
        open_ = [k for k, vid in enumerate(active) if self.is_candidate(vid)]
        if open_:
            for vid in active[: min(open_[-1], len(active) - 2) + 1]:
                self._retire(vid, mapping=True)
        self.merge_candidates()
        self._drain_worker()
        self._run_loop_closure(sync=True)
        self.global_optimize()
        self._lc_active = False
        self._lc_queue = []
        self._episode = []
        self._prune()

    def global_optimize(self):
        """Joint optimization of every active and reference pose."""
        if not self.reference:
            return None
        problem = mapping_problem(self.graph, self.active, self.reference)
        result = optimize(problem)
        if result.termination is Termination.GAUGE_FAILURE:
            raise GaugeFailure("global optimization has an unanchored component")
        self._apply(result.poses)
        self.global_optimizations += 1
        return result

    # ------------------------------------------------------- loop closure

    def _run_loop_closure(self, sync: bool) -> None:
        if not self._lc_queue or self.matcher is None:
            return
        queries, self._lc_queue = self._lc_queue, []
        snapshot = self.graph.copy()
        if sync:
            self._commit(loop_closure_search(snapshot, queries, self.matcher, self.config))
            return
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="loop-closure")
        self._pending.append(self._executor.submit(loop_closure_search, snapshot, queries,
                                                   self.matcher, self.config))

    def _commit_worker_results(self) -> None:
        done = [f for f in self._pending if f.done()]
        self._pending = [f for f in self._pending if not f.done()]
        for f in done:
            self._commit(f.result())

    def _drain_worker(self) -> None:
        pending, self._pending = self._pending, []
        for f in pending:
            self._commit(f.result())

    def _commit(self, edges: list[Edge]) -> None:
        added = 0
        for e in edges:
            if e.source not in self.reference or e.target not in self.reference:
                continue
            self.graph.add_edge(e)
            self.committed_loops.append(e)
            added += 1
        if added:
            self.merge_candidates()
            self.global_optimize()

    # ------------------------------------------------------------ metrics

    def joint_ids(self) -> list[VertexId]:
        return sorted(set(self.active) | self.reference)

    def joint_metric_graph(self) -> PoseGraph:
        g = subgraph(self.graph, self.joint_ids())
        for eid in [eid for eid, e in g.edges.items() if e.is_unary]:
            g.remove_edge(eid)
        return g

    def joint_lambda2(self) -> float:
        ids = self.joint_ids()
        self.eigensolves += 1
        if len(ids) < 2:
            return 0.0
        return fiedler(build_laplacian(self.graph, ids, Weighting.FIM_MIN_EIG))[0]

    def local_degree(self) -> float:
        """Mean trace-weighted degree of the newest active keyframes."""
        newest = list(self.active)[-self.config.degree_horizon:]
        total = 0.0
        for vid in newest:
            for eid in self.graph.adjacency[vid]:
                e = self.graph.edges[eid]
                if not e.is_unary:
                    total += e.trace_weight
        return total / len(newest)

    # --------------------------------------------------------- trajectory

    def trajectory(self, session: int) -> tuple[list[VertexId], list[Pose], list[Pose | None]]:
        """Latest estimate and ground truth of every keyframe of ``session``."""
        ids = sorted({v for v in self.graph.vertices if v.session == session}
                     | {v for v in self._removed if v.session == session})
        est, truth = [], []
        for vid in ids:
            if vid in self.graph.vertices:
                v = self.graph.vertices[vid]
                est.append(v.pose)
                truth.append(v.truth)
            else:
                p, t = self._removed[vid]
                est.append(p)
                truth.append(t)
        return ids, est, truth

    def reference_graph(self) -> PoseGraph:
        return subgraph(self.graph, self.reference)
