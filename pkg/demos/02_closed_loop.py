"""
A few closed-loop drilling runs
===============================

Runs the tightened controller and the position-control baseline on the
same noise realisations, then writes the metrics and the two figures.
"""
import sys
from pathlib import Path

from sgmpc import harness
from sgmpc.config import ExperimentConfig

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-out")
cfg = ExperimentConfig(n_trajectories=5, controllers=["ours", "position"])
result = harness.run_batch(cfg, out)
reports = harness.reports_for_batch(result)
harness.emit_outputs(result, reports, out)

for rep in reports:
    print(f"{rep.method:>9}: MCP_min={rep.mcp_min} ACP={rep.acp} break={rep.break_ratio} "
          f"GR A={rep.gr_fraction('A')} IOU={rep.iou_mean:.3f}")
print("figures in", out / "plot.svg", "and", out / "precision.svg")
