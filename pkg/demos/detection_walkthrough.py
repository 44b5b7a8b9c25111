"""Detection at desk scale: closed form next to Monte-Carlo, then a threshold search.

Run with ``python demos/detection_walkthrough.py``.
"""
import numpy as np

from abnormality_mc import Scenario, estimate_error, reference_config
from abnormality_mc.detection import (false_alarm_prob, miss_detection_prob,
                                      optimize_thresholds)

cfg = reference_config(x_FC=300.0, N_s=6, alpha=0.3, delta=0.002, lam=2.0,
                       M=1e7, tau1=2, tau2=8.0, tau2_agg=40.0)
print(f"{cfg.K} slots, {cfg.N_s} sensors")

for sensor_type in ("memoryless", "aggregate"):
    fa = false_alarm_prob(sensor_type, config=cfg).value
    md = miss_detection_prob(sensor_type, config=cfg).value
    mc_fa = estimate_error("FA", Scenario(sensor_type=sensor_type, seed=1), 50_000, cfg)
    mc_md = estimate_error("MD", Scenario(sensor_type=sensor_type, seed=2), 50_000, cfg)
    print(f"{sensor_type:>10}: P_FA {fa:.4f} (MC {mc_fa.value:.4f} +- {mc_fa.stderr:.4f})"
          f"  P_MD {md:.4f} (MC {mc_md.value:.4f} +- {mc_md.stderr:.4f})")

# how much do markers buy once both thresholds are tuned? at this scale the
# best threshold ignores markers altogether, so the minimum does not move
for M in (0.0, 1e7, 2e7):
    best = optimize_thresholds("memoryless", range(cfg.N_s + 2), np.arange(3.0, 30.0),
                               cfg.replace(M=M, alpha=0.3, N_s=10))
    print(f"M={M:.0e}: min P_e^D {best.pe:.4f} at tau1={best.tau1}, tau2={best.tau2:g}")
