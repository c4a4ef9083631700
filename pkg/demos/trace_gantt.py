"""Text Gantt chart of one pipelined iteration.

Each row is a lane; letters mark the stage kind running there.

    python demos/trace_gantt.py [P] [N]
"""

import sys

from pipelearn.cost import network, profile_model
from pipelearn.sim import lane_intervals, simulate_iteration

P, N = (int(a) for a in sys.argv[1:3]) if len(sys.argv) > 2 else (1, 3)
WIDTH = 100
GLYPH = {"fc": "F", "u": ">", "fs": "f", "bs": "b", "d": "<", "bc": "B"}

profile = profile_model("vgg5-like", seed=0)
run = simulate_iteration(P, N, profile, network("4g"), record=True)
span = run.epoch_makespan
rows: dict[str, list[str]] = {}
for lane, stage, start, end in lane_intervals(run.trace):
    row = rows.setdefault(lane, [" "] * WIDTH)
    kind = stage.split("_")[0].rstrip("0123456789")  # "fc0_1@0": kind, device, micro-batch, iteration
    lo, hi = int(start / span * WIDTH), max(int(start / span * WIDTH) + 1, int(end / span * WIDTH))
    for i in range(lo, min(hi, WIDTH)):
        row[i] = GLYPH.get(kind, "#")

print(f"P={P} N={N} iteration {span:.3f} s")
for lane, row in rows.items():
    print(f"{lane:>10s} |{''.join(row)}|")
print("F device fwd, > upload, f server fwd, b server bwd, < download, B device bwd")
