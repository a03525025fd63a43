"""A new session that closes a loop the prior map left open.

Session A drives a U around a block. Session B starts on mapped ground,
drives the unmapped side, and arrives back at the start of the U. The
merged side turns the reference graph into a ring: its average degree and,
much more so, its algebraic connectivity go up.

    python3 demos/loop_enforcement.py [seed]
"""

from __future__ import annotations

import sys

from sessiongraph import NoiseModel, OracleMatcher, Pipeline, build_scenario
from sessiongraph.simulator import scenario_streams
from sessiongraph.spectral import Weighting, spectral_report


def describe(tag: str, pipe: Pipeline) -> None:
    unit = spectral_report(pipe.graph, pipe.reference, Weighting.UNIT)
    eig = spectral_report(pipe.graph, pipe.reference, Weighting.FIM_MIN_EIG)
    print(f"{tag:18s} vertices {unit.m:4d}  d {unit.d_bar:.3f}  lambda2(unit) {unit.lambda2_bar:.5f}  "
          f"lambda2(min-eig) {eig.lambda2_bar:.3f}  tree measure {unit.spanning_tree:.3f}")


def main(seed: int = 0) -> None:
    world, script = build_scenario("loop_enforcer", seed)
    noise = NoiseModel()
    a, b = scenario_streams(world, script, noise)
    pipe = Pipeline(matcher=OracleMatcher(world, noise))
    pipe.run_session(a)
    describe("after session A", pipe)
    pipe.run_session(b)
    describe("after session B", pipe)
    cross = [e for e in pipe.committed_loops if e.source.session != e.target.session]
    print(f"\nsession B merged {len(pipe.merged[1])} keyframes; "
          f"cross-session loop closures: {[(tuple(e.source), tuple(e.target)) for e in cross]}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
