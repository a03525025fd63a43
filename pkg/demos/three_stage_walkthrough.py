"""Walk through a two-session run: map a courtyard, then revisit it and
wander into an unmapped wing.

Prints the decision trace around every mode change and the accuracy of the
second session with and without the decision module.

    python3 demos/three_stage_walkthrough.py [seed]
"""

from __future__ import annotations

import sys

from sessiongraph.decision import Event
from sessiongraph.evaluation import run_scenario


def fmt(x):
    return "   --   " if x is None else f"{x:8.3f}"


def main(seed: int = 0) -> None:
    run = run_scenario("three_stage", seed)
    rows = run.rows(1)
    print(f"session A: {len(run.streams[0].events)} keyframes, all mapped (no prior map yet)")
    print(f"session B: {len(rows)} keyframes against a {run.reference_before[1]}-vertex reference\n")

    marks = [k for k, r in enumerate(rows) if r.event is not Event.NONE]
    shown = sorted({j for k in marks for j in range(max(0, k - 3), min(len(rows), k + 4))})
    print(" kf  mode            d_bar   lambda2        mu  inter  event")
    last = -1
    for k in shown:
        if k != last + 1:
            print(" ...")
        r = rows[k]
        print(f"{r.keyframe:3d}  {r.mode.value:12s} {r.d_bar:9.3e} {fmt(r.lambda2)} {r.mu:9.3e}"
              f"  {r.inter_edges:3d}  {'' if r.event is Event.NONE else r.event.value}")
        last = k

    merged = run.pipeline.merged[1]
    print(f"\nmerged {len(merged)} new keyframes ({merged[0].index}..{merged[-1].index}); "
          f"{len(run.pipeline.committed_loops)} loop closures; "
          f"{run.pipeline.eigensolves} Fiedler evaluations in total")

    ablation = run_scenario("three_stage", seed, ablation=True)
    print(f"session B ATE: {run.ate([1]):.3f} m with mapping, "
          f"{ablation.ate([1]):.3f} m localization-only")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
