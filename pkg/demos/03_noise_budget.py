"""
Estimating the noise budget from data
=====================================

Simulates the plant under position control, estimates W, M and the
measurement proxy per noise group, and compares them with the true
settings of the synthetic sensor.
"""
import numpy as np

from sgmpc import harness
from sgmpc.config import ExperimentConfig

cfg = ExperimentConfig.model_validate({"budget": {"source": "estimate", "estimate": {"n_trajectories": 20}}})
pcfg = cfg.plant_config()
estimated = harness.resolve_budgets(cfg, pcfg)
true = pcfg.true_budgets()

np.set_printoptions(formatter={"float": "{:.2e}".format})
for (start, est), (_, ref) in zip(estimated, true):
    print(f"group starting at step {start}")
    print("  M half-width est :", est.M.interval_hull()[1])
    print("  M half-width true:", ref.M.interval_hull()[1])
    print("  proxy diag est   :", np.diag(est.Sigma_eps))
    print("  proxy diag true  :", np.diag(ref.Sigma_eps))
    print("  W half-width est :", est.W.interval_hull()[1])
