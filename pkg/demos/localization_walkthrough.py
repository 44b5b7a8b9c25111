"""Localization: type-A thresholds versus the type-B storage-reading rule.

Run with ``python demos/localization_walkthrough.py``.
"""
from abnormality_mc import reference_config
from abnormality_mc.localization import (argmax_matches_ml, localization_error_imperfect_type_a,
                                         localization_error_perfect, localization_error_type_b,
                                         optimal_thresholds_type_a)

cfg = reference_config(x_FC=300.0, N_s=10, alpha=0.8, delta=0.0, M=1e10)
print("type-A thresholds with 3 releasing sensors:", optimal_thresholds_type_a(3, cfg).gamma)

for M in (1e8, 1e9, 1e10, 1e11, 1e12):
    perfect = localization_error_perfect(config=cfg.replace(M=M)).value
    noisy = localization_error_imperfect_type_a(config=cfg.replace(M=M, delta=0.01))
    print(f"M={M:.0e}: type-A {perfect:.3e} (delta=0), {noisy.estimate.value:.4f} "
          f"(delta=0.01, bound {noisy.upper_bound:.4f})")

for delta in (0.001, 0.01, 0.05):
    c = cfg.replace(delta=delta)
    print(f"delta={delta}: type-B error {localization_error_type_b(config=c).value:.2e}, "
          f"argmax equals ML: {argmax_matches_ml(c)}")

# with fewer, weaker sensors and rare noise, the largest slot count is already the ML choice
small = reference_config(x_FC=240.0, N_s=6, alpha=0.3, delta=0.002)
print(f"N_s=6, alpha=0.3, delta=0.002: argmax equals ML: {argmax_matches_ml(small)}")
