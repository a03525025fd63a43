from __future__ import annotations

import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from sessiongraph import geometry as geo
from sessiongraph import io
from sessiongraph.cli import main
from sessiongraph.evaluation import DegenerateAlignment, evaluate_ate
from sessiongraph.geometry import Pose
from sessiongraph.graph import EdgeKind, NonSpdInformation, Role, VertexId
from sessiongraph.simulator import NoiseModel

from conftest import random_pose, random_spd

IDENT_INFO = " ".join(io.fmt(x) for x in io.info_to_triu(np.eye(6)))
P3_FILE = (
    "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\n"
    "VERTEX_SE3:QUAT 1 1 0 0 0 0 0 1\n"
    "VERTEX_SE3:QUAT 2 2 0 0 0 0 0 1\n"
    f"EDGE_SE3:QUAT 0 1 1 0 0 0 0 0 1 {IDENT_INFO}\n"
    f"EDGE_SE3:QUAT 1 2 1 0 0 0 0 0 1 {IDENT_INFO}\n"
)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


# ------------------------------------------------------------------ graph files


def test_vertex_record(tmp_path):
    g, warnings = io.parse_graph(write(tmp_path, "v.g2o", "VERTEX_SE3:QUAT 0 1 2 3 0 0 0 1\n"))
    v = g.vertices[VertexId(0, 0)]
    np.testing.assert_array_equal(v.pose.translation, [1, 2, 3])
    np.testing.assert_array_equal(v.pose.rotation, np.eye(3))
    assert warnings == 0


def test_short_information_is_malformed(tmp_path):
    info20 = " ".join(["1"] * 20)
    text = "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nVERTEX_SE3:QUAT 1 1 0 0 0 0 0 1\n" \
           f"EDGE_SE3:QUAT 0 1 1 0 0 0 0 0 1 {info20}\n"
    with pytest.raises(io.MalformedRecord) as exc:
        io.parse_graph(write(tmp_path, "bad.g2o", text))
    assert exc.value.line == 3


def test_non_numeric_and_non_spd(tmp_path):
    with pytest.raises(io.MalformedRecord):
        io.parse_graph(write(tmp_path, "a.g2o", "VERTEX_SE3:QUAT 0 x 0 0 0 0 0 1\n"))
    neg = " ".join(io.fmt(x) for x in io.info_to_triu(-np.eye(6)))
    text = P3_FILE.splitlines()[0] + "\n" + P3_FILE.splitlines()[1] + f"\nEDGE_SE3:QUAT 0 1 1 0 0 0 0 0 1 {neg}\n"
    with pytest.raises(NonSpdInformation):
        io.parse_graph(write(tmp_path, "b.g2o", text))


def test_unknown_records_counted(tmp_path):
    g, warnings = io.parse_graph(write(tmp_path, "u.g2o", P3_FILE + "FIX 0\nVERTEX_XY 9 1 2\n"))
    assert warnings == 2 and len(g.vertices) == 3


def test_kinds_without_manifest(tmp_path):
    text = P3_FILE + f"EDGE_SE3:QUAT 0 2 2 0 0 0 0 0 1 {IDENT_INFO}\nEDGE_SE3:QUAT 0 0 0 0 0 0 0 0 1 {IDENT_INFO}\n"
    g, _ = io.parse_graph(write(tmp_path, "k.g2o", text))
    assert [e.kind for e in g.edges.values()] == [EdgeKind.INTRA, EdgeKind.INTRA, EdgeKind.LOOP, EdgeKind.PRIOR]


def test_information_expands_symmetrically(rng):
    info = random_spd(rng)
    np.testing.assert_array_equal(io.info_from_triu(io.info_to_triu(info)), np.triu(info) + np.triu(info, 1).T)


def _random_graph(rng, m=12):
    from sessiongraph.graph import Edge, PoseGraph, Vertex
    g = PoseGraph()
    for k in range(m):
        s = k // 6
        g.add_vertex(Vertex(VertexId(s, k), random_pose(rng), float(k), Role.REFERENCE, random_pose(rng)))
    ids = sorted(g.vertices)
    for a, b in zip(ids, ids[1:]):
        kind = EdgeKind.INTRA if a.session == b.session else EdgeKind.LOOP
        g.add_edge(Edge(a, b, kind, random_pose(rng), random_spd(rng)), check_roles=False)
    g.add_edge(Edge(ids[3], ids[9], EdgeKind.INTER, random_pose(rng), random_spd(rng)), check_roles=False)
    g.add_edge(Edge(ids[0], ids[0], EdgeKind.PRIOR, random_pose(rng), 1e6 * np.eye(6)))
    return g


def test_round_trip_value_identical(tmp_path, rng):
    g = _random_graph(rng)
    path = tmp_path / "g.g2o"
    io.write_graph(g, path, io.build_manifest(g, {0: "A", 1: "B"}))
    h, manifest = io.load_graph(path)
    assert set(h.vertices) == set(g.vertices)
    for vid, v in g.vertices.items():
        w = h.vertices[vid]
        assert np.max(np.abs(w.pose.translation - v.pose.translation)) <= 1e-12
        assert np.max(np.abs(w.pose.quat - v.pose.quat)) <= 1e-12
        assert np.max(np.abs(w.truth.translation - v.truth.translation)) <= 1e-12
        assert w.timestamp == v.timestamp and w.role is v.role
    for (i, e), (j, f) in zip(sorted(g.edges.items()), sorted(h.edges.items())):
        assert (e.source, e.target, e.kind) == (f.source, f.target, f.kind)
        assert np.max(np.abs(e.information - f.information)) <= 1e-12 * np.max(np.abs(e.information))
        assert np.max(np.abs(e.measurement.translation - f.measurement.translation)) <= 1e-12
    assert io.serialize_graph(h) == io.serialize_graph(g)
    assert [s["label"] for s in manifest["sessions"]] == ["A", "B"]


def test_serialize_normalizes(tmp_path):
    messy = "# comment\n\n" + P3_FILE.replace(" ", "   ")
    g, _ = io.parse_graph(write(tmp_path, "m.g2o", messy))
    again, _ = io.parse_graph(write(tmp_path, "n.g2o", io.serialize_graph(g)))
    assert io.serialize_graph(again) == io.serialize_graph(g)


def test_stream_files_round_trip(tmp_path):
    from sessiongraph.simulator import build_scenario, scenario_streams
    w, sc = build_scenario("overlap_pair", 2)
    streams = scenario_streams(w, sc, NoiseModel())
    io.write_streams(streams, tmp_path)
    back = io.read_streams(tmp_path)
    assert [s.label for s in back] == ["A", "B"]
    for a, b in zip(streams, back):
        for x, y in zip(a.events, b.events):
            assert x.index == y.index
            if x.odometry is not None:
                np.testing.assert_array_equal(x.odometry.translation, y.odometry.translation)
                np.testing.assert_array_equal(x.information, y.information)


def test_config_parsing():
    cfg = io.parse_config("window_size = 12\n# note\ndecision.window = 30\nnoise.match_dropout = 0\n"
                          "noise.odom_sigma = 0.01 0.01 0.01 0.001 0.001 0.001\ndeterministic = false\nseed = 4\n")
    assert cfg.pipeline.window_size == 12 and cfg.pipeline.decision.window == 30
    assert cfg.noise.match_dropout == 0.0 and cfg.noise.odom_sigma[0] == 0.01
    assert cfg.pipeline.deterministic is False and cfg.seed == 4
    for bad in ("nonsense", "bogus = 1", "foo.window = 3", "window_size = 1", "deterministic = maybe"):
        with pytest.raises(io.ConfigError):
            io.parse_config(bad)


def test_trace_columns(tmp_path):
    from sessiongraph.evaluation import run_scenario
    run = run_scenario("full_overlap", 0)
    p = tmp_path / "t.csv"
    io.write_trace(run.pipeline.rows, p, timing=False)
    rows = io.read_trace(p)
    assert list(rows[0]) == list(io.TRACE_COLUMNS)
    assert len(rows) == sum(len(s.events) for s in run.streams)
    for s in ("0", "1"):
        ks = [int(r["keyframe"]) for r in rows if r["session"] == s]
        assert ks == sorted(ks)
    assert all(r["wall_ms"] == "NA" for r in rows)


# ------------------------------------------------------------------------ ATE


def test_ate_identity_and_rigid_offset(rng):
    truth = rng.uniform(-10, 10, (30, 3))
    assert evaluate_ate(truth, truth) == pytest.approx(0.0, abs=1e-12)
    T = random_pose(rng)
    moved = truth @ T.rotation.T + T.translation
    assert evaluate_ate(moved, truth) < 1e-9


def _square_oracle(est, truth):
    """Closed-form alignment from scipy plus a brute-force yaw search for the planar case."""
    ce, ct = est.mean(axis=0), truth.mean(axis=0)
    rot, _ = Rotation.align_vectors(truth - ct, est - ce)
    err = rot.apply(est - ce) - (truth - ct)
    closed = np.sqrt(np.mean(np.sum(err ** 2, axis=1)))
    best = np.inf
    for yaw in np.linspace(-np.pi, np.pi, 200001):
        R = Rotation.from_euler("z", yaw)
        e = R.apply(est - ce) - (truth - ct)
        best = min(best, np.sqrt(np.mean(np.sum(e ** 2, axis=1))))
    return closed, best


def test_ate_unit_square_against_oracles():
    truth = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    est = truth.copy()
    est[2] += [0.2, 0.0, 0.0]
    closed, brute = _square_oracle(est, truth)
    ate = evaluate_ate(est, truth)
    assert ate == pytest.approx(closed, abs=1e-12)
    assert ate == pytest.approx(brute, abs=1e-8)
    assert 0 < ate < 0.1


def test_ate_invariant_under_common_transform(rng):
    truth = rng.uniform(-10, 10, (40, 3))
    est = truth + 0.3 * rng.standard_normal(truth.shape)
    base = evaluate_ate(est, truth)
    for _ in range(10):
        T = random_pose(rng)
        f = lambda x: x @ T.rotation.T + T.translation
        assert evaluate_ate(f(est), f(truth)) == pytest.approx(base, abs=1e-9)


def test_ate_degenerate():
    line = np.array([[k, 0, 0] for k in range(5)], dtype=float)
    with pytest.raises(DegenerateAlignment):
        evaluate_ate(line, line)
    with pytest.raises(DegenerateAlignment):
        evaluate_ate(line[:2], line[:2])
    with pytest.raises(DegenerateAlignment):
        evaluate_ate(np.zeros((4, 3)), np.zeros((5, 3)))


def test_ate_accepts_poses(rng):
    poses = [random_pose(rng) for _ in range(10)]
    assert evaluate_ate(poses, poses) == pytest.approx(0.0, abs=1e-12)


# ------------------------------------------------------------------------ CLI


def test_metrics_on_p3(tmp_path, capsys):
    path = write(tmp_path, "p3.g2o", P3_FILE)
    assert main(["metrics", "--graph", str(path)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert "d_bar 1.333333" in out
    assert "lambda2_bar 1.000000" in out
    assert "vertices 3" in out
    assert "degree 1 2.000000" in out


def test_eval_identical_files(tmp_path, capsys):
    rng = np.random.default_rng(3)
    poses = [random_pose(rng) for _ in range(8)]
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    io.write_trajectory(poses, a)
    io.write_trajectory(poses, b)
    assert main(["eval", "--est", str(a), "--truth", str(b)]) == 0
    assert capsys.readouterr().out.strip() == "0.000000"


def test_eval_reads_graph_files(tmp_path, capsys):
    sq = ("VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nVERTEX_SE3:QUAT 1 1 0 0 0 0 0 1\n"
          "VERTEX_SE3:QUAT 2 1 1 0 0 0 0 1\nVERTEX_SE3:QUAT 3 0 1 0 0 0 0 1\n")
    a = write(tmp_path, "a.g2o", sq)
    b = write(tmp_path, "b.g2o", sq.replace("2 1 1 0", "2 1.2 1 0"))
    assert main(["eval", "--est", str(b), "--truth", str(a)]) == 0
    closed, _ = _square_oracle(io.read_trajectory(b), io.read_trajectory(a))
    assert capsys.readouterr().out.strip() == f"{closed:.6f}"


def test_exit_codes(tmp_path, capsys):
    assert main([]) == 1
    assert main(["metrics"]) == 1
    assert main(["simulate", "--scenario", "nowhere", "--out", str(tmp_path)]) == 1
    assert main(["metrics", "--graph", str(tmp_path / "missing.g2o")]) == 2
    bad = write(tmp_path, "bad.g2o", "VERTEX_SE3:QUAT 0 1 2\n")
    assert main(["metrics", "--graph", str(bad)]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error: data: ") and len(err[-1].splitlines()) == 1


def test_merge_check(tmp_path, capsys):
    ok = write(tmp_path, "ok.g2o", P3_FILE)
    assert main(["merge-check", "--graph", str(ok)]) == 0
    split = write(tmp_path, "split.g2o", P3_FILE.splitlines()[0] + "\n" + "VERTEX_SE3:QUAT 5 9 9 0 0 0 0 1\n")
    assert main(["merge-check", "--graph", str(split)]) == 3
    assert capsys.readouterr().err.strip().startswith("error: invariant: ")


def _simulate_and_run(tmp_path, scenario, tag):
    sims = tmp_path / f"sim_{tag}"
    out = tmp_path / f"out_{tag}"
    assert main(["simulate", "--scenario", scenario, "--seed", "1", "--out", str(sims)]) == 0
    assert main(["run", "--sessions", str(sims), "--out", str(out)]) == 0
    return sims, out


@pytest.fixture(scope="module")
def full_overlap_runs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    return [_simulate_and_run(tmp, "full_overlap", k) for k in range(2)]


def test_run_full_overlap_adds_nothing(full_overlap_runs):
    _, out = full_overlap_runs[0]
    lines = (out / "summary.txt").read_text().splitlines()
    assert lines[1].startswith("session 1 label=B ")
    assert "reference_added=0" in lines[1]
    assert "reference_added=131" in lines[0]


def test_outputs_are_byte_identical(full_overlap_runs):
    (s1, o1), (s2, o2) = full_overlap_runs
    names = sorted(p.name for p in o1.iterdir())
    assert names == ["graph.g2o", "graph.manifest.json", "metrics.csv", "summary.txt"]
    for name in names:
        assert (o1 / name).read_bytes() == (o2 / name).read_bytes()
    for p in sorted(s1.iterdir()):
        assert p.read_bytes() == (s2 / p.name).read_bytes()


def test_run_output_passes_merge_check_and_metrics(full_overlap_runs, capsys):
    _, out = full_overlap_runs[0]
    assert main(["merge-check", "--graph", str(out / "graph.g2o")]) == 0
    assert main(["metrics", "--graph", str(out / "graph.g2o"), "--weighting", "trace"]) == 0
    text = capsys.readouterr().out
    assert "weighting trace" in text and "lambda2_bar" in text


def test_run_with_prior_skips_known_sessions(full_overlap_runs, tmp_path, capsys):
    sims, out = full_overlap_runs[0]
    dest = tmp_path / "again"
    assert main(["run", "--prior", str(out / "graph.g2o"), "--sessions", str(sims), "--out", str(dest)]) == 0
    text = capsys.readouterr().out
    assert "session 0 already in prior; skipped" in text


def test_console_entry_point(tmp_path):
    path = write(tmp_path, "p3.g2o", P3_FILE)
    res = subprocess.run([sys.executable, "-m", "sessiongraph.cli", "metrics", "--graph", str(path)],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "d_bar 1.333333" in res.stdout
