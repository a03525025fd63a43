"""Command-line entry point: ``sessiongraph <subcommand> ...``.

Exit codes: 0 success, 1 usage, 2 data error, 3 invariant violation. Errors
are reported as one ``error: <kind>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import io
from .evaluation import DegenerateAlignment, evaluate_ate
from .graph import EdgeKind, GraphError, PoseGraph, Role, connected_components
from .pipeline import Pipeline
from .simulator import SCENARIOS, NoiseModel, OracleMatcher, UnknownScenario, build_scenario, scenario_streams
from .spectral import SpectralError, Weighting, spectral_report

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InvariantViolation(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sessiongraph", description="Multi-session pose-graph localization and mapping.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate session stream files for a canned scenario")
    s.add_argument("--scenario", required=True, choices=SCENARIOS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="key = value file (noise.* keys are used)")
    s.add_argument("--out", required=True)

    r = sub.add_parser("run", help="process session streams against an optional prior graph")
    r.add_argument("--prior", help="prior graph file (its .manifest.json sibling is read if present)")
    r.add_argument("--prior-manifest")
    r.add_argument("--sessions", required=True, help="directory written by simulate")
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--threaded", action="store_true",
                   help="run loop closure on a worker thread (outputs then include wall times)")

    m = sub.add_parser("metrics", help="spectral report of a graph file")
    m.add_argument("--graph", required=True)
    m.add_argument("--manifest")
    m.add_argument("--weighting", choices=[w.value for w in Weighting], default="unit")

    e = sub.add_parser("eval", help="ATE RMSE between two trajectories")
    e.add_argument("--est", required=True)
    e.add_argument("--truth", required=True)

    c = sub.add_parser("merge-check", help="connectivity and invariant audit of a graph file")
    c.add_argument("--graph", required=True)
    c.add_argument("--manifest")
    return p


def cmd_simulate(args) -> int:
    cfg = io.load_config(args.config)
    world, script = build_scenario(args.scenario, args.seed)
    streams = scenario_streams(world, script, cfg.noise)
    out = Path(args.out)
    io.write_streams(streams, out)
    io.write_json(out / "scenario.json", {"scenario": args.scenario, "seed": args.seed,
                                          "noise": io.config_echo(cfg)["noise"]})
    for s in streams:
        print(f"session {s.session} label={s.label} keyframes={len(s.events)}")
    return EXIT_OK


def _matcher_for(directory: Path):
    meta_path = directory / "scenario.json"
    if not meta_path.exists():
        return None, None
    meta = io.read_json(meta_path)
    noise = NoiseModel(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["noise"].items()})
    world, _ = build_scenario(meta["scenario"], int(meta["seed"]))
    return OracleMatcher(world, noise), meta


def cmd_run(args) -> int:
    cfg = io.load_config(args.config)
    pcfg = cfg.pipeline
    if args.threaded:
        from dataclasses import replace
        pcfg = replace(pcfg, deterministic=False)
    prior = PoseGraph()
    labels: dict[int, str] = {}
    if args.prior:
        prior, manifest = io.load_graph(args.prior, args.prior_manifest)
        if manifest:
            labels.update({int(s["id"]): s["label"] for s in manifest["sessions"]})
    sdir = Path(args.sessions)
    streams = io.read_streams(sdir)
    if not streams:
        raise FileNotFoundError(f"no session_*.json files in {sdir}")
    matcher, meta = _matcher_for(sdir)
    pipe = Pipeline(pcfg, matcher, prior)
    prior_sessions = {v.session for v in prior.vertices}
    summary = []
    try:
        for stream in streams:
            if stream.session in prior_sessions:
                print(f"session {stream.session} already in prior; skipped")
                continue
            labels[stream.session] = stream.label
            before = len(pipe.reference)
            pipe.run_session(stream)
            _, est, truth = pipe.trajectory(stream.session)
            ate = None
            if all(t is not None for t in truth):
                try:
                    ate = evaluate_ate(est, truth)
                except DegenerateAlignment:
                    ate = None
            summary.append((stream.session, stream.label, len(stream.events), len(pipe.reference) - before, ate))
    finally:
        pipe.close()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = io.build_manifest(pipe.graph, labels, seed=None if meta is None else meta["seed"],
                                 config=io.config_echo(cfg),
                                 scenario=None if meta is None else meta["scenario"])
    io.write_graph(pipe.graph, out / "graph.g2o", manifest)
    io.write_trace(pipe.rows, out / "metrics.csv", timing=not pcfg.deterministic)
    lines = [f"session {s} label={lab} keyframes={n} reference_added={add} ate={io.fixed(a)}"
             for s, lab, n, add, a in summary]
    (out / "summary.txt").write_text("".join(l + "\n" for l in lines))
    for line in lines:
        print(line)
    return EXIT_OK


def cmd_metrics(args) -> int:
    g, _ = io.load_graph(args.graph, args.manifest)
    rep = spectral_report(g, None, Weighting(args.weighting))
    ids = io.flat_ids(g)
    print(f"vertices {rep.m}")
    print(f"weighting {rep.weighting.value}")
    print(f"d_bar {io.fixed(rep.d_bar)}")
    print(f"lambda2_bar {io.fixed(rep.lambda2_bar)}")
    print(f"spanning_tree {io.fixed(rep.spanning_tree)}")
    weak = [f"{ids[g.edges[e].source]}-{ids[g.edges[e].target]}" for e in rep.weakest_edges]
    print("weakest_edges " + (" ".join(weak) if weak else "none"))
    for vid, deg in rep.node_degrees.items():
        print(f"degree {ids[vid]} {io.fixed(deg)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    est = io.read_trajectory(args.est)
    truth = io.read_trajectory(args.truth)
    print(io.fixed(evaluate_ate(est, truth)))
    return EXIT_OK


def audit(g: PoseGraph) -> list[str]:
    """Invariant violations of a stored graph (empty when healthy)."""
    problems = []
    try:
        g.check_invariants()
    except GraphError as exc:
        problems.append(str(exc))
    for eid, e in g.edges.items():
        if e.kind is EdgeKind.INTRA and (e.source.session != e.target.session
                                         or e.target.index != e.source.index + 1):
            problems.append(f"edge {eid}: INTRA edge joins non-consecutive keyframes")
        if e.kind is EdgeKind.PRIOR and e.source != e.target:
            problems.append(f"edge {eid}: PRIOR edge is not unary")
    reference = [vid for vid, v in g.vertices.items() if v.role is Role.REFERENCE]
    if reference:
        comps = connected_components(g, reference)
        if len(comps) > 1:
            problems.append(f"reference graph has {len(comps)} connected components")
    return problems


def cmd_merge_check(args) -> int:
    g, _ = io.load_graph(args.graph, args.manifest)
    problems = audit(g)
    if problems:
        raise InvariantViolation("; ".join(problems))
    n_ref = sum(v.role is Role.REFERENCE for v in g.vertices.values())
    print(f"ok vertices={len(g.vertices)} edges={len(g.edges)} reference={n_ref} components=1")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "metrics": cmd_metrics,
            "eval": cmd_eval, "merge-check": cmd_merge_check}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    try:
        return COMMANDS[args.command](args)
    except InvariantViolation as exc:
        return _fail("invariant", exc, EXIT_INVARIANT)
    except (OSError, ValueError, KeyError, GraphError, SpectralError, json.JSONDecodeError,
            UnknownScenario) as exc:
        return _fail("data", exc, EXIT_DATA)


if __name__ == "__main__":
    sys.exit(main())
