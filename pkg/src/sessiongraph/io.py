"""File formats: g2o-style graph files with a JSON sidecar manifest, keyframe
stream files, metric traces and flat key=value configuration."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .decision import DecisionConfig
from .geometry import Pose
from .graph import Edge, EdgeKind, PoseGraph, Role, Vertex, VertexId
from .pipeline import KeyframeEvent, MetricsRow, PipelineConfig, SessionStream
from .simulator import NoiseModel

log = logging.getLogger(__name__)

VERTEX_TAG = "VERTEX_SE3:QUAT"
EDGE_TAG = "EDGE_SE3:QUAT"
TRACE_COLUMNS = ("keyframe", "session", "mode", "d_bar_trace", "lambda2_eig", "mu", "sigma",
                 "event", "wall_ms")
_TRIU = np.triu_indices(6)


class MalformedRecord(ValueError):
    def __init__(self, line: int, reason: str) -> None:
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class ConfigError(ValueError):
    pass


def fmt(x: float) -> str:
    """Shortest text that parses back to the same double."""
    return repr(float(x))


def fixed(x: float | None) -> str:
    """Human-facing number: six decimals, ``NA`` for missing values."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "NA"
    return f"{x:.6f}"


def pose_to_list(p: Pose) -> list[float]:
    return [float(v) for v in p.translation] + [float(v) for v in p.quat]


def pose_from_list(v) -> Pose:
    v = [float(x) for x in v]
    if len(v) != 7:
        raise ValueError(f"pose needs 7 numbers, got {len(v)}")
    return Pose(v[3:], v[:3])


def info_to_triu(info: np.ndarray) -> list[float]:
    return [float(x) for x in np.asarray(info)[_TRIU]]


def info_from_triu(values) -> np.ndarray:
    m = np.zeros((6, 6))
    m[_TRIU] = values
    return m + np.triu(m, 1).T


# ----------------------------------------------------------------- graph file


@dataclasses.dataclass
class ParsedGraph:
    """Raw records of a graph file, in file order."""

    vertices: list[tuple[int, Pose]]
    edges: list[tuple[int, int, Pose, np.ndarray]]
    warnings: int = 0


def read_records(path: str | Path) -> ParsedGraph:
    out = ParsedGraph([], [])
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            try:
                if tok[0] == VERTEX_TAG:
                    if len(tok) != 9:
                        raise MalformedRecord(lineno, f"{VERTEX_TAG} needs 8 fields, got {len(tok) - 1}")
                    vals = [float(x) for x in tok[2:]]
                    out.vertices.append((int(tok[1]), pose_from_list(vals)))
                elif tok[0] == EDGE_TAG:
                    if len(tok) != 31:
                        raise MalformedRecord(lineno, f"{EDGE_TAG} needs 30 fields, got {len(tok) - 1}")
                    vals = [float(x) for x in tok[3:]]
                    out.edges.append((int(tok[1]), int(tok[2]), pose_from_list(vals[:7]),
                                      info_from_triu(vals[7:])))
                else:
                    out.warnings += 1
            except MalformedRecord:
                raise
            except ValueError as exc:
                raise MalformedRecord(lineno, str(exc)) from None
    return out


def parse_graph(path: str | Path, manifest: dict | None = None) -> tuple[PoseGraph, int]:
    """Load a graph file; returns ``(graph, unknown_record_count)``.

    Without a manifest every vertex is ``(0, flat id)`` and REFERENCE; unary
    edges are PRIOR, consecutive ids INTRA, anything else LOOP.
    """
    rec = read_records(path)
    if rec.warnings:
        log.warning("%s: skipped %d unknown records", path, rec.warnings)
    ids: dict[int, VertexId] = {}
    roles: dict[int, Role] = {}
    timestamps: dict[int, float] = {}
    truth: dict[int, Pose] = {}
    kinds: list[EdgeKind] | None = None
    if manifest is not None:
        for entry in manifest["vertices"]:
            flat = int(entry["id"])
            ids[flat] = VertexId(int(entry["session"]), int(entry["index"]))
            roles[flat] = Role(entry.get("role", "REFERENCE"))
            timestamps[flat] = float(entry.get("timestamp", 0.0))
            if entry.get("truth") is not None:
                truth[flat] = pose_from_list(entry["truth"])
        kinds = [EdgeKind(k) for k in manifest["edge_kinds"]]
        if len(kinds) != len(rec.edges):
            raise ValueError(f"manifest lists {len(kinds)} edge kinds for {len(rec.edges)} edges")
    g = PoseGraph()
    for flat, pose in rec.vertices:
        vid = ids.get(flat, VertexId(0, flat)) if manifest is None else ids[flat]
        g.add_vertex(Vertex(vid, pose, timestamps.get(flat, 0.0), roles.get(flat, Role.REFERENCE),
                            truth.get(flat)))
        ids[flat] = vid
    for k, (a, b, z, info) in enumerate(rec.edges):
        if a not in ids or b not in ids:
            raise ValueError(f"edge {k} references an unknown vertex id")
        if kinds is not None:
            kind = kinds[k]
        elif a == b:
            kind = EdgeKind.PRIOR
        elif b == a + 1:
            kind = EdgeKind.INTRA
        else:
            kind = EdgeKind.LOOP
        g.add_edge(Edge(ids[a], ids[b], kind, z, info), edge_id=k, check_roles=False)
    return g, rec.warnings


def flat_ids(g: PoseGraph) -> dict[VertexId, int]:
    return {vid: k for k, vid in enumerate(sorted(g.vertices))}


def serialize_graph(g: PoseGraph) -> str:
    ids = flat_ids(g)
    lines = []
    for vid in sorted(g.vertices):
        p = g.vertices[vid].pose
        lines.append(" ".join([VERTEX_TAG, str(ids[vid])] + [fmt(x) for x in pose_to_list(p)]))
    for eid in sorted(g.edges):
        e = g.edges[eid]
        lines.append(" ".join([EDGE_TAG, str(ids[e.source]), str(ids[e.target])]
                              + [fmt(x) for x in pose_to_list(e.measurement)]
                              + [fmt(x) for x in info_to_triu(e.information)]))
    return "\n".join(lines) + "\n"


def build_manifest(g: PoseGraph, sessions: dict[int, str] | None = None, *, seed: int | None = None,
                   config: dict | None = None, scenario: str | None = None) -> dict:
    ids = flat_ids(g)
    if sessions is None:
        sessions = {s: "" for s in sorted({v.session for v in g.vertices})}
    return {
        "sessions": [{"id": s, "label": sessions[s]} for s in sorted(sessions)],
        "vertices": [
            {"id": ids[vid], "session": vid.session, "index": vid.index,
             "role": g.vertices[vid].role.value, "timestamp": g.vertices[vid].timestamp,
             "truth": None if g.vertices[vid].truth is None else pose_to_list(g.vertices[vid].truth)}
            for vid in sorted(g.vertices)
        ],
        "edge_kinds": [g.edges[eid].kind.value for eid in sorted(g.edges)],
        "scenario": scenario,
        "config": config or {},
        "seed": seed,
    }


def write_graph(g: PoseGraph, path: str | Path, manifest: dict | None = None) -> None:
    Path(path).write_text(serialize_graph(g))
    if manifest is not None:
        write_json(manifest_path(path), manifest)


def manifest_path(graph_path: str | Path) -> Path:
    p = Path(graph_path)
    return p.with_name(p.stem + ".manifest.json")


def load_graph(path: str | Path, manifest: str | Path | None = None) -> tuple[PoseGraph, dict | None]:
    """Graph file plus its manifest (explicit path, or the sibling ``*.manifest.json`` if present)."""
    mpath = Path(manifest) if manifest is not None else manifest_path(path)
    data = read_json(mpath) if (manifest is not None or mpath.exists()) else None
    g, _ = parse_graph(path, data)
    return g, data


def write_json(path: str | Path, data: Any) -> None:
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text())


# --------------------------------------------------------------- stream files


def stream_to_dict(stream: SessionStream) -> dict:
    return {
        "session": stream.session,
        "label": stream.label,
        "initial_pose": pose_to_list(stream.initial_pose),
        "events": [
            {"index": ev.index, "timestamp": ev.timestamp,
             "odometry": None if ev.odometry is None else pose_to_list(ev.odometry),
             "information": None if ev.information is None else info_to_triu(ev.information),
             "truth": None if ev.truth is None else pose_to_list(ev.truth)}
            for ev in stream.events
        ],
    }


def stream_from_dict(d: dict) -> SessionStream:
    events = []
    for e in d["events"]:
        events.append(KeyframeEvent(
            session=int(d["session"]), index=int(e["index"]), timestamp=float(e["timestamp"]),
            odometry=None if e["odometry"] is None else pose_from_list(e["odometry"]),
            information=None if e["information"] is None else info_from_triu(e["information"]),
            truth=None if e.get("truth") is None else pose_from_list(e["truth"]),
        ))
    return SessionStream(int(d["session"]), d.get("label", ""), pose_from_list(d["initial_pose"]), events)


def write_streams(streams: Iterable[SessionStream], directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in streams:
        p = directory / f"session_{s.session:03d}.json"
        write_json(p, stream_to_dict(s))
        paths.append(p)
    return paths


def read_streams(directory: str | Path) -> list[SessionStream]:
    paths = sorted(Path(directory).glob("session_*.json"))
    return [stream_from_dict(read_json(p)) for p in paths]


# ------------------------------------------------------------------- traces


def trace_rows(rows: Iterable[MetricsRow], timing: bool = True) -> list[list[str]]:
    out = []
    for r in rows:
        out.append([str(r.keyframe), str(r.session), r.mode.value, fixed(r.d_bar), fixed(r.lambda2),
                    fixed(r.mu), fixed(r.sigma), r.event.value, fixed(r.wall_ms) if timing else "NA"])
    return out


def write_trace(rows: Iterable[MetricsRow], path: str | Path, timing: bool = True) -> None:
    """CSV metrics trace. ``timing=False`` writes wall time as NA so the file is reproducible."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        w.writerows(trace_rows(rows, timing))


def read_trace(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ------------------------------------------------------------------- config


@dataclasses.dataclass
class RunConfig:
    pipeline: PipelineConfig = dataclasses.field(default_factory=PipelineConfig)
    noise: NoiseModel = dataclasses.field(default_factory=NoiseModel)
    scenario: str | None = None
    seed: int = 0


def _coerce(text: str, like: Any, key: str):
    text = text.strip()
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(like, tuple):
        return tuple(float(x) for x in text.replace(",", " ").split())
    if like is None:
        return None if text.lower() in ("none", "") else float(text)
    try:
        return type(like)(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None


def parse_config(text: str) -> RunConfig:
    """Flat ``key = value`` lines; ``decision.*`` and ``noise.*`` keys address the nested sections."""
    sections: dict[str, dict[str, Any]] = {"": {}, "decision": {}, "noise": {}}
    defaults = {"": PipelineConfig(), "decision": DecisionConfig(), "noise": NoiseModel()}
    top: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in ("scenario", "seed"):
            top[key] = value if key == "scenario" else int(value)
            continue
        section, _, name = key.rpartition(".")
        if section not in sections:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        names = {f.name for f in dataclasses.fields(defaults[section])}
        if name not in names or name in ("decision", "window_convergence"):
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        sections[section][name] = _coerce(value, getattr(defaults[section], name), key)
    try:
        decision = DecisionConfig(**sections["decision"])
        pipeline = PipelineConfig(decision=decision, **sections[""])
        noise = NoiseModel(**sections["noise"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(pipeline, noise, top.get("scenario"), top.get("seed", 0))


def load_config(path: str | Path | None) -> RunConfig:
    return RunConfig() if path is None else parse_config(Path(path).read_text())


def config_echo(cfg: RunConfig) -> dict:
    """JSON-friendly echo of the effective configuration."""
    p = dataclasses.asdict(cfg.pipeline)
    return {"pipeline": p, "noise": dataclasses.asdict(cfg.noise), "scenario": cfg.scenario, "seed": cfg.seed}


# ------------------------------------------------------------- trajectories


def read_trajectory(path: str | Path) -> np.ndarray:
    """Positions from a graph file (vertex order by id) or a whitespace table.

    Tables may have 3 (x y z), 7 (x y z qx qy qz qw) or 8 (t x y z qx qy qz qw) columns.
    """
    text = Path(path).read_text()
    if VERTEX_TAG in text:
        rec = read_records(path)
        return np.array([p.translation for _, p in sorted(rec.vertices, key=lambda v: v[0])])
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        try:
            vals = [float(x) for x in tok]
        except ValueError:
            raise MalformedRecord(lineno, "non-numeric trajectory row") from None
        if len(vals) in (3, 7):
            rows.append(vals[:3])
        elif len(vals) == 8:
            rows.append(vals[1:4])
        else:
            raise MalformedRecord(lineno, f"expected 3, 7 or 8 columns, got {len(vals)}")
    return np.array(rows, dtype=float).reshape(-1, 3)


def write_trajectory(poses: Iterable[Pose], path: str | Path) -> None:
    Path(path).write_text("".join(" ".join(fmt(x) for x in pose_to_list(p)) + "\n" for p in poses))
