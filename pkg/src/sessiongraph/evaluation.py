"""Trajectory error after rigid alignment, and scenario drivers used by the
CLI, the demos and the tests."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Pose
from .pipeline import Pipeline, PipelineConfig, SessionStream
from .simulator import NoiseModel, OracleMatcher, ScenarioScript, World, build_scenario, scenario_streams


class DegenerateAlignment(ValueError):
    pass


def rigid_alignment(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation R and translation t minimizing sum |R src_i + t - dst_i|^2 (no scale)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise DegenerateAlignment("need two equal-length (N, 3) position sets")
    if len(src) < 3:
        raise DegenerateAlignment("alignment needs at least three positions")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    A, B = src - cs, dst - cd
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise DegenerateAlignment("positions are collinear")
    U, _, Vt = np.linalg.svd(B.T @ A)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    return R, cd - R @ cs


def evaluate_ate(estimate, truth) -> float:
    """Position RMSE after aligning ``estimate`` onto ``truth``.

    Accepts lists of :class:`Pose` or (N, 3) position arrays.
    """
    est = _positions(estimate)
    ref = _positions(truth)
    if len(est) != len(ref):
        raise DegenerateAlignment(f"trajectory lengths differ: {len(est)} vs {len(ref)}")
    R, t = rigid_alignment(est, ref)
    err = est @ R.T + t - ref
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def _positions(traj) -> np.ndarray:
    if isinstance(traj, np.ndarray):
        return traj.astype(float)
    return np.array([p.translation if isinstance(p, Pose) else p for p in traj], dtype=float)


@dataclass
class ScenarioRun:
    world: World
    script: ScenarioScript
    streams: list[SessionStream]
    pipeline: Pipeline
    # reference vertex count before each session
    reference_before: list[int] = field(default_factory=list)

    def rows(self, session: int):
        return [r for r in self.pipeline.rows if r.session == session]

    def ate(self, sessions=None) -> float:
        sessions = range(len(self.streams)) if sessions is None else sessions
        est, ref = [], []
        for s in sessions:
            _, e, t = self.pipeline.trajectory(s)
            est += e
            ref += t
        return evaluate_ate(est, ref)


def run_scenario(name: str, seed: int = 0, config: PipelineConfig | None = None,
                 noise: NoiseModel | None = None, ablation: bool = False) -> ScenarioRun:
    """Generate a canned scenario and process every session in order.

    ``ablation`` disables the decision module: after the first session the
    pipeline only localizes.
    """
    world, script = build_scenario(name, seed)
    noise = noise or NoiseModel()
    config = config or PipelineConfig()
    if ablation:
        config = replace(config, decision_enabled=False)
    streams = scenario_streams(world, script, noise)
    pipe = Pipeline(config, OracleMatcher(world, noise))
    run = ScenarioRun(world, script, streams, pipe)
    try:
        for stream in streams:
            run.reference_before.append(len(pipe.reference))
            pipe.run_session(stream)
    finally:
        pipe.close()
    return run


def prior_from_stream(stream: SessionStream, use_truth: bool = True):
    """Reference graph built directly from a stream: one vertex per keyframe,
    INTRA edges from odometry and a PRIOR on the first vertex.

    With ``use_truth`` the vertices sit at their ground-truth poses (a
    converged prior map); otherwise odometry is integrated.
    """
    from .graph import Edge, EdgeKind, PoseGraph, Role, Vertex, VertexId

    g = PoseGraph()
    pose = stream.initial_pose
    prev = None
    for ev in stream.events:
        vid = VertexId(ev.session, ev.index)
        if prev is not None:
            pose = pose @ ev.odometry
        est = ev.truth if use_truth and ev.truth is not None else pose
        g.add_vertex(Vertex(vid, est, ev.timestamp, Role.REFERENCE, ev.truth))
        if prev is None:
            g.add_edge(Edge(vid, vid, EdgeKind.PRIOR, est, 1e6 * np.eye(6)))
        else:
            g.add_edge(Edge(prev, vid, EdgeKind.INTRA, ev.odometry, ev.information), check_roles=False)
        prev = vid
    return g
