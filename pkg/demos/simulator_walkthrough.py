"""One simulated trial in detail, then the source-count law against its closed form.

Run with ``python demos/simulator_walkthrough.py``.
"""
import numpy as np

from abnormality_mc import Scenario, reference_config
from abnormality_mc.detection import slot_probs_h0, source_vector_pmf
from abnormality_mc.simulator import run_trial, simulate

cfg = reference_config(x_FC=300.0, N_s=6, alpha=0.3, delta=0.02, lam=2.0,
                       M=1e7, tau1=2, tau2=8.0, tau2_agg=40.0)

trial = run_trial(Scenario(hypothesis="H1"), cfg, np.random.default_rng(5))
print(f"abnormality in slot {trial.j_star}; alarm raised: {trial.detected}")
for n, s in enumerate(trial.sensors):
    print(f"  sensor {n}: {s.cause:>6} at slot {s.activation_slot}")
print("source vector:", trial.source_vector)

counts = {}
for batch in simulate(Scenario(hypothesis="H0", seed=9), cfg, 20_000):
    for r in map(tuple, batch.sources.tolist()):
        counts[r] = counts.get(r, 0) + 1
probs = slot_probs_h0(cfg)
print("most common source vectors without an abnormality:")
for r, c in sorted(counts.items(), key=lambda kv: -kv[1])[:5]:
    print(f"  {r}: observed {c / 20_000:.4f}, predicted {source_vector_pmf(r, probs, cfg):.4f}")
