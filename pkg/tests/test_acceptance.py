"""Acceptance suite: one PASS/FAIL line per numbered criterion.

Each test records its verdict through the ``acceptance`` fixture before
asserting, so the terminal summary lists every criterion even when some fail.
"""
import csv
import io
import math
import subprocess
import sys
import time
from collections import defaultdict

import numpy as np
import pytest
from scipy import stats

from abnormality_mc.core import fc_hit_vector, gaussian_tail_q, reference_config
from abnormality_mc.detection import (EnumerationPolicy, false_alarm_prob, miss_detection_prob,
                                      slot_probs_h0, source_matrix, source_vector_pmf)
from abnormality_mc.experiments import preset_spec, run_experiment
from abnormality_mc.localization import (argmax_decide_type_b, argmax_matches_ml,
                                         localization_error_type_b, ml_decide_type_b,
                                         optimal_thresholds_type_a)
from abnormality_mc.simulator import Scenario, estimate_error, simulate

DESK = dict(x_FC=300.0, N_s=6, alpha=0.3, delta=0.002, lam=2.0, M=1e7, tau1=2, tau2=8.0, tau2_agg=40.0)
LOC = dict(x_FC=300.0, N_s=10, alpha=0.8, delta=0.0, M=1e10)


def read_rows(text):
    return list(csv.DictReader(line for line in io.StringIO(text) if not line.startswith("#")))


def value(row):
    return float(row["value"]), float(row["stderr"])


@pytest.fixture(scope="module")
def desk_validate_csv(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    texts = []
    for name in ("first.csv", "second.csv"):
        path = out / name
        proc = subprocess.run([sys.executable, "-m", "abnormality_mc", "run", "--preset", "desk-validate",
                               "--seed", "42", "--out", str(path)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        texts.append(path.read_bytes())
    return texts


def test_criterion_01_detection_cross_validation(acceptance):
    cfg = reference_config(**DESK)
    n = 100_000
    worst, slowest, ok = 0.0, 0.0, True
    parts = []
    for sensor_type in ("memoryless", "aggregate"):
        for metric, analytic in (("FA", false_alarm_prob), ("MD", miss_detection_prob)):
            start = time.perf_counter()
            a = analytic(sensor_type, policy=EnumerationPolicy.exact(), config=cfg).value
            m = estimate_error(metric, Scenario(sensor_type=sensor_type, seed=7), n, cfg)
            slowest = max(slowest, time.perf_counter() - start)
            tol = max(0.01, 4 * m.stderr)
            gap = abs(a - m.value)
            ok &= gap <= tol
            worst = max(worst, gap / tol)
            parts.append(f"{sensor_type[:3]} {metric} {a:.4f}/{m.value:.4f}")
    ok &= slowest <= 120
    assert acceptance(1, ok, f"{'; '.join(parts)}; worst gap/tol {worst:.2f}; slowest {slowest:.1f}s")


def test_criterion_02_argmax_equals_ml(acceptance):
    cfg = reference_config(x_FC=240.0, N_s=6, alpha=0.3, delta=0.002)
    start = time.perf_counter()
    R = source_matrix(cfg.N_s, cfg.K)
    agree = 0
    for r in R:
        try:
            ml = ml_decide_type_b(r, cfg)
        except ValueError:
            ml = None
        try:
            am = argmax_decide_type_b(r)
        except ValueError:
            am = None
        agree += ml == am
    elapsed = time.perf_counter() - start
    ok = cfg.K == 4 and len(R) == 210 and argmax_matches_ml(cfg) and agree == len(R) and elapsed < 1
    assert acceptance(2, ok, f"condition {argmax_matches_ml(cfg)}; {agree}/{len(R)} agree; {elapsed:.2f}s")


def test_criterion_03_type_b_perfect_sensing(acceptance):
    cfg = reference_config(**LOC)
    start = time.perf_counter()
    analytic = localization_error_type_b(config=cfg).value
    mc = estimate_error("PE_L", Scenario(fc_type="B", seed=3), 10_000, cfg)
    errors = round(mc.value * mc.n_trials)
    elapsed = time.perf_counter() - start
    ok = analytic == 0.0 and errors == 0 and elapsed <= 60
    assert acceptance(3, ok, f"analytic {analytic}; MC {errors}/{mc.n_trials}; {elapsed:.1f}s")


def test_criterion_04_type_a_vs_markers(acceptance):
    start = time.perf_counter()
    rows = read_rows(run_experiment(preset_spec("fig6")).to_csv())
    curves = defaultdict(list)
    for r in rows:
        if r["metric_name"] == "PE_L_typeA":
            curves[float(r["delta"])].append((float(r["M"]), float(r["value"])))
    perfect = [v for _, v in sorted(curves[0.0])]
    noisy = [v for _, v in sorted(curves[0.01])]
    monotone = all(b <= a + 1e-9 for a, b in zip(perfect, perfect[1:]))
    plateau = abs(noisy[-1] - noisy[-2]) < 1e-3 and min(noisy[-2:]) > 0.01
    elapsed = time.perf_counter() - start
    ok = len(perfect) == 5 and monotone and perfect[-1] < 1e-3 and plateau and elapsed <= 300
    assert acceptance(4, ok, f"delta=0 {' '.join(f'{v:.3g}' for v in perfect)}; "
                             f"delta=0.01 tail {noisy[-2]:.4f} {noisy[-1]:.4f}")


def _gaussian_error(gamma1, gamma2, means):
    """Type-A error for fixed releasing count, K=3, thresholds broadcast."""
    s = np.sqrt(means)
    correct = ((1.0 - gaussian_tail_q((gamma1 - means[0]) / s[0]))
               + (gaussian_tail_q((gamma1 - means[1]) / s[1]) - gaussian_tail_q((gamma2 - means[1]) / s[1]))
               + gaussian_tail_q((gamma2 - means[2]) / s[2]))
    return 1.0 - correct / 3.0


def test_criterion_05_threshold_optimality(acceptance):
    start = time.perf_counter()
    worst = -np.inf
    for M in (1e7, 1e8):
        cfg = reference_config(x_FC=180.0, N_s=10, alpha=0.8, M=M)
        assert cfg.K == 3
        lam_fc = cfg.lam * cfg.V_FC / cfg.V_s
        for r in (1, 3, 10):
            means = r * M * fc_hit_vector(cfg) + lam_fc
            g1, g2 = optimal_thresholds_type_a(r, cfg).gamma[1:3]
            axes = [g + np.arange(-120, 121) * 0.05 * math.sqrt(g) for g in (g1, g2)]
            G1, G2 = np.meshgrid(*axes, indexing="ij")
            grid = np.where(G1 < G2, _gaussian_error(G1, G2, means), np.inf)
            worst = max(worst, _gaussian_error(g1, g2, means) - grid.min())
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed <= 120
    assert acceptance(5, ok, f"largest improvement found on grid {worst:.2e}; {elapsed:.1f}s")


def test_criterion_06_interior_tau1_minimum(acceptance):
    rows = read_rows(run_experiment(preset_spec("fig3")).to_csv())
    curves = defaultdict(list)
    for r in rows:
        curves[float(r["lambda"])].append((int(r["tau1"]), *value(r)))
    ok, opts, parts = True, [], []
    for lam in sorted(curves):
        tau1, v, se = map(np.array, zip(*sorted(curves[lam])))
        k = int(np.argmin(v))
        interior = 0 < k < len(v) - 1 and all(
            v[end] - v[k] > 4 * math.hypot(se[end], se[k]) for end in (0, -1))
        ok &= interior
        opts.append(tau1[k])
        parts.append(f"lambda={lam:g} tau1_opt={tau1[k]} ({'interior' if interior else 'not interior'})")
    ok &= all(b >= a for a, b in zip(opts, opts[1:]))
    assert acceptance(6, ok, "; ".join(parts))


def test_criterion_07_markers_help_detection(acceptance):
    rows = read_rows(run_experiment(preset_spec("fig4")).to_csv())
    best = {(float(r["alpha"]), float(r["M"]), int(r["N_s"])): value(r) for r in rows}
    ok, strict, total = True, 0, 0
    for (alpha, M, N_s), (v, se) in best.items():
        if M != 1e7:
            continue
        v0, se0 = best[(alpha, 0.0, N_s)]
        total += 1
        ok &= v <= v0 + 4 * math.hypot(se, se0) + 1e-12
        strict += v < v0 - 1e-12
    assert acceptance(7, ok, f"M=1e7 <= M=0 at every (alpha, N_s); strictly better at {strict}/{total}")


def test_criterion_08_sensor_type_crossover(acceptance):
    rows = read_rows(run_experiment(preset_spec("fig5")).to_csv())
    pe = {(float(r["delta"]), r["metric_name"]): value(r) for r in rows}
    deltas = sorted({d for d, _ in pe})

    def lead(delta, winner, loser):
        (w, sw), (l, sl) = pe[(delta, f"PE_D_{winner}")], pe[(delta, f"PE_D_{loser}")]
        return l - w > 4 * math.hypot(sw, sl)

    low, high = deltas[0], deltas[-1]
    ok = lead(low, "aggregate", "memoryless") and lead(high, "memoryless", "aggregate")
    detail = "; ".join(f"delta={d:g} mem {pe[(d, 'PE_D_memoryless')][0]:.4f} "
                       f"agg {pe[(d, 'PE_D_aggregate')][0]:.4f}" for d in (low, high))
    assert acceptance(8, ok, detail)


def test_criterion_09_source_vector_law(acceptance):
    cfg = reference_config(**{**DESK, "delta": 0.02})
    R = source_matrix(cfg.N_s, cfg.K)
    probs = slot_probs_h0(cfg)
    expected = 1e5 * np.array([source_vector_pmf(r, probs, cfg) for r in R])
    index = {tuple(r): i for i, r in enumerate(R)}
    observed = np.zeros(len(R))
    for b in simulate(Scenario(hypothesis="H0", seed=2024), cfg, 100_000):
        keys, counts = np.unique(b.sources, axis=0, return_counts=True)
        for key, c in zip(keys, counts):
            observed[index[tuple(key)]] += c
    big = expected >= 5
    obs = np.append(observed[big], observed[~big].sum())
    exp = np.append(expected[big], expected[~big].sum())
    p = stats.chisquare(obs, exp * obs.sum() / exp.sum()).pvalue
    assert acceptance(9, p > 1e-3, f"chi-square p={p:.3g} over {big.sum() + 1} bins")


def test_criterion_10_type_a_bound(acceptance, desk_validate_csv):
    rows = read_rows(desk_validate_csv[0].decode())
    pairs = defaultdict(dict)
    for r in rows:
        if r["engine"] == "analytic" and r["metric_name"] in ("PE_L_typeA", "PE_L_typeA_bound"):
            pairs[r["delta"]][r["metric_name"]] = float(r["value"])
    ok = len(pairs) == 3 and all(p["PE_L_typeA"] <= p["PE_L_typeA_bound"] for p in pairs.values())
    detail = "; ".join(f"delta={d}: {p['PE_L_typeA']:.4g} <= {p['PE_L_typeA_bound']:.4g}"
                       for d, p in pairs.items())
    assert acceptance(10, ok, detail)


def test_criterion_11_determinism(acceptance, desk_validate_csv):
    first, second = desk_validate_csv
    ok = first == second and len(first) > 0
    assert acceptance(11, ok, f"two runs, {len(first)} bytes each, identical={first == second}")
