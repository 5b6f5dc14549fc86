"""
Probabilistic reachable sets for the drilling plant
====================================================

Builds the PRS schedule of each uncertainty model on the default budget and
prints how wide the deviation sets get along the drilling axis.
"""
import numpy as np

from sgmpc import sets
from sgmpc.config import ExperimentConfig
from sgmpc.controller import design_gains
from sgmpc.uncertainty import build_prs_schedule, measurement_systems

cfg = ExperimentConfig()
pcfg = cfg.plant_config()
budgets = pcfg.true_budgets()

I = np.eye(5)
gains = design_gains(I, I, np.diag(cfg.gains.Q), np.diag(cfg.gains.R), table_L=cfg.gains.L)
systems = measurement_systems(I, I, I, gains.K, gains.L)

# support of the deviation set along +p_x, in mm; this is the break-through margin
e_px = np.zeros(10)
e_px[0] = 1.0
for method in ("ours", "zero_mean_subgaussian", "gaussian", "robust"):
    sched = build_prs_schedule(systems, budgets, cfg.delta, method=method)
    first, last = sched.at(0), sched.at(len(sched) - 1)
    print(f"{method:>22}: {len(sched):4d} entries, converged={sched.converged}, "
          f"px margin {1e3 * sets.support(first, e_px):.3f} -> {1e3 * sets.support(last, e_px):.3f} mm")

# the bias zonotope is what separates 'ours' from the zero-mean model
ours = build_prs_schedule(systems, budgets, cfg.delta, method="ours")
tail = ours.entry(len(ours) - 1)
print("steady bias part along px:", 1e3 * sets.support(tail.F_xi, e_px), "mm")
print("steady ellipsoid part along px:", 1e3 * sets.support(tail.E_xi, e_px), "mm")
