import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from abnormality_mc.core import TailMode, count_tail, reference_config, sensor_hit_matrix
from abnormality_mc.detection import (BudgetExceeded, EnumerationPolicy, SensorType, alarm_probs,
                                      count_source_vectors, detection_error_prob,
                                      enumerate_source_vectors, false_alarm_prob,
                                      marker_activation_prob, miss_detection_prob,
                                      optimize_thresholds, slot_probs_h0, slot_probs_h1,
                                      source_vector_pmf, truncation_residual)

DESK = dict(x_FC=300.0, N_s=6, alpha=0.3, delta=0.002, lam=2.0, M=1e7, tau1=2, tau2=8.0, tau2_agg=40.0)


def desk(**kw):
    return reference_config(**{**DESK, **kw})


# -- slot probabilities -----------------------------------------------------

def test_h0_slot_probs_by_hand():
    p = slot_probs_h0(desk(delta=0.1)).p
    assert np.allclose(p, [0.1, 0.09, 0.081, 0.0729, 0.06561, 0.9 ** 5])


def test_h1_slot_probs_by_hand():
    cfg = desk(alpha=0.3, delta=0.1)
    p = slot_probs_h1(2, cfg).p
    # before, at, after the abnormality, then never
    expected = [0.1, 0.4 * 0.9, 0.9 * 0.6 * 0.1, 0.9 ** 2 * 0.6 * 0.1, 0.9 ** 3 * 0.6 * 0.1, 0.9 ** 4 * 0.6]
    assert np.allclose(p, expected)


@settings(max_examples=80, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(1, 8), st.data())
def test_h1_slot_probs_sum_to_one(a, d, K, data):
    if a + d > 1:
        a, d = a / (a + d), d / (a + d)
    cfg = desk(alpha=a, delta=d, x_FC=60.0 * K)
    j = data.draw(st.integers(1, K))
    assert math.fsum(slot_probs_h1(j, cfg).p) == pytest.approx(1.0, abs=1e-12)
    assert math.fsum(slot_probs_h0(cfg).p) == pytest.approx(1.0, abs=1e-12)


def test_h1_slot_range_checked():
    with pytest.raises(ValueError):
        slot_probs_h1(6, desk())


# -- source vectors ---------------------------------------------------------

def test_vector_count_stars_and_bars():
    assert count_source_vectors(6, 5) == 462
    assert len(list(enumerate_source_vectors(desk()))) == 462
    assert count_source_vectors(20, 10) == math.comb(30, 10)
    assert count_source_vectors(6, 5, cap=2) == math.comb(7, 5)


def test_enumeration_order():
    cfg = desk(N_s=2, x_FC=120.0)
    assert list(enumerate_source_vectors(cfg)) == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]


def test_pmf_matches_scipy_multinomial():
    cfg = desk(delta=0.05)
    probs = slot_probs_h1(3, cfg)
    for r in [(0, 0, 0, 0, 0), (1, 0, 2, 0, 0), (0, 1, 1, 1, 1), (0, 0, 6, 0, 0)]:
        full = list(r) + [cfg.N_s - sum(r)]
        assert source_vector_pmf(r, probs, cfg) == pytest.approx(
            stats.multinomial.pmf(full, cfg.N_s, probs.p), rel=1e-12)


def test_pmf_sums_to_one():
    cfg = desk(delta=0.07)
    for probs in (slot_probs_h0(cfg), slot_probs_h1(4, cfg)):
        total = math.fsum(source_vector_pmf(r, probs, cfg) for r in enumerate_source_vectors(cfg))
        assert total == pytest.approx(1.0, abs=1e-9)


def test_pmf_rejects_bad_vectors():
    cfg = desk()
    with pytest.raises(ValueError):
        source_vector_pmf((1, 2), slot_probs_h0(cfg), cfg)
    with pytest.raises(ValueError):
        source_vector_pmf((4, 4, 0, 0, 0), slot_probs_h0(cfg), cfg)


def test_truncation_residual_covers_omitted_mass():
    cfg = desk(delta=0.2)
    probs = slot_probs_h0(cfg)
    for cap in range(0, 6):
        kept = math.fsum(source_vector_pmf(r, probs, cfg)
                         for r in enumerate_source_vectors(cfg, EnumerationPolicy.truncated(cap)))
        assert truncation_residual(probs, cfg.N_s, cap) >= (1 - kept) - 1e-12


def test_sampled_enumeration_is_seeded():
    cfg = desk(delta=0.2)
    probs = slot_probs_h0(cfg)
    a = list(enumerate_source_vectors(cfg, EnumerationPolicy.sampled(50, seed=3), probs))
    b = list(enumerate_source_vectors(cfg, EnumerationPolicy.sampled(50, seed=3), probs))
    assert a == b and len(a) == 50


def test_exact_budget_refused():
    cfg = reference_config()        # N_s=20, K=10: ~3e7 vectors
    with pytest.raises(BudgetExceeded):
        false_alarm_prob("memoryless", "exact", EnumerationPolicy.exact(), cfg)


def test_policy_parse_and_label():
    assert EnumerationPolicy.parse("exact").label() == "exact"
    assert EnumerationPolicy.parse("truncated:3").cap == 3
    pol = EnumerationPolicy.parse("sampled:1e4", seed=9)
    assert (pol.n, pol.seed, pol.label()) == (10000, 9, "sampled:10000")
    for bad in ("sampled", "bogus:3", "truncated:"):
        with pytest.raises(ValueError):
            EnumerationPolicy.parse(bad)


# -- cooperative activation -------------------------------------------------

def test_memoryless_activation_by_hand():
    cfg = desk()
    mu = sensor_hit_matrix(cfg)
    r = np.array([1, 0, 2, 0, 0])
    quiet = 1.0
    for i in range(5):
        quiet *= 1 - count_tail(cfg.tau2, cfg.lam + cfg.M * (r @ mu[:, i]))
    assert marker_activation_prob(r, "memoryless", "exact", cfg) == pytest.approx(1 - quiet, rel=1e-12)


def test_aggregate_activation_by_hand():
    cfg = desk()
    mu = sensor_hit_matrix(cfg)
    r = np.array([0, 1, 0, 0, 1])
    total = 5 * cfg.lam + cfg.M * (r @ mu).sum()
    assert marker_activation_prob(r, "aggregate", "exact", cfg) == pytest.approx(
        stats.poisson.sf(39, total), rel=1e-12)


def test_alarm_probs_binomial_tail():
    n1 = np.array([0, 1, 3])
    pa = np.array([0.2, 0.5, 0.9])
    out = alarm_probs(n1, pa, 6, [2])[0]
    assert out[0] == pytest.approx(stats.binom.sf(1, 6, 0.2))
    assert out[1] == pytest.approx(stats.binom.sf(0, 5, 0.5))
    assert out[2] == 1.0


# -- error probabilities: closed forms --------------------------------------

def test_single_sensor_single_slot():
    # K=1, N_s=1: the sensor is a source with prob delta, otherwise it fires on noise
    cfg = desk(x_FC=60.0, N_s=1, tau1=1, delta=0.03, alpha=0.4, lam=6.0, tau2=8.0)
    q = count_tail(8, 6.0)
    assert false_alarm_prob("memoryless", config=cfg).value == pytest.approx(0.03 + 0.97 * q)
    assert miss_detection_prob("memoryless", config=cfg).value == pytest.approx((1 - 0.43) * (1 - q))


def test_two_sensors_one_slot_with_markers():
    cfg = desk(x_FC=60.0, N_s=2, tau1=2, delta=0.1, lam=2.0, M=3e7, tau2=6.0)
    d = 0.1
    mu11 = sensor_hit_matrix(cfg)[0, 0]
    q0 = count_tail(6, 2.0)
    q1 = count_tail(6, 2.0 + 3e7 * mu11)
    expected = d * d + 2 * d * (1 - d) * q1 + (1 - d) ** 2 * q0 ** 2
    assert false_alarm_prob("memoryless", config=cfg).value == pytest.approx(expected, rel=1e-12)


def test_single_aggregate_sensor_two_slots():
    cfg = desk(x_FC=120.0, N_s=1, tau1=1, delta=0.05, lam=3.0, M=0.0, tau2_agg=9.0)
    q = stats.poisson.sf(8, 6.0)
    expected = 1 - 0.95 ** 2 + 0.95 ** 2 * q
    assert false_alarm_prob("aggregate", config=cfg).value == pytest.approx(expected, rel=1e-12)


def test_trivial_limits():
    cfg = desk()
    for st_ in SensorType:
        assert false_alarm_prob(st_, config=cfg.replace(tau1=0)).value == 1.0
        assert false_alarm_prob(st_, config=cfg.replace(delta=0.0, M=0.0, lam=0.0)).value == 0.0
        assert miss_detection_prob(st_, config=cfg.replace(alpha=1.0, delta=0.0)).value == pytest.approx(0.0, abs=1e-15)
        assert miss_detection_prob(st_, config=cfg.replace(tau1=cfg.N_s + 1)).value == pytest.approx(1.0)


def test_error_mixes_with_prior():
    cfg = desk(prior_h0=0.3)
    fa = false_alarm_prob("mem", config=cfg).value
    md = miss_detection_prob("mem", config=cfg).value
    assert detection_error_prob("mem", config=cfg).value == pytest.approx(0.3 * fa + 0.7 * md)


def test_gauss_mode_converges_to_exact():
    # thresholds two standard deviations above the noise mean, growing scale
    gaps = []
    for scale in (1, 16, 256):
        lam = 5.0 * scale
        cfg = desk(lam=lam, M=1e7 * scale, tau2=lam + 2 * math.sqrt(lam),
                   tau2_agg=5 * lam + 2 * math.sqrt(5 * lam))
        ex = detection_error_prob("agg", "exact", config=cfg).value
        ga = detection_error_prob("agg", "gauss", config=cfg).value
        gaps.append(abs(ga - ex))
    assert gaps[0] > gaps[1] > gaps[2]


def test_truncated_policy_brackets_exact():
    cfg = desk(delta=0.05)
    ex = false_alarm_prob("mem", "exact", EnumerationPolicy.exact(), cfg)
    tr = false_alarm_prob("mem", "exact", EnumerationPolicy.truncated(2), cfg)
    assert tr.provenance == "analytic-truncated"
    assert tr.value <= ex.value + 1e-15
    assert ex.value <= tr.value + tr.residual_bound + 1e-15


def test_sampled_policy_agrees_with_exact():
    cfg = desk(delta=0.02)
    ex = detection_error_prob("mem", "exact", EnumerationPolicy.exact(), cfg)
    sa = detection_error_prob("mem", "exact", EnumerationPolicy.sampled(20000, seed=5), cfg)
    assert sa.provenance == "analytic-sampled"
    assert sa.stderr > 0
    assert abs(sa.value - ex.value) < 5 * sa.stderr + 1e-4


def test_more_markers_never_hurts_detection():
    base = desk(delta=0.0, lam=2.0)
    values = [miss_detection_prob("mem", config=base.replace(M=m)).value for m in (0.0, 1e6, 1e7, 1e8)]
    assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))


# -- threshold search -------------------------------------------------------

def test_optimize_matches_pointwise_evaluation():
    cfg = desk()
    search = optimize_thresholds("memoryless", range(0, 8), [4, 6, 8, 10], cfg)
    assert search.surface.shape == (8, 4)
    direct = detection_error_prob("mem", config=cfg.replace(tau1=search.tau1, tau2=search.tau2)).value
    assert search.pe == pytest.approx(direct, rel=1e-12)
    assert search.pe == pytest.approx(search.surface.min())
    a, b = 3, 2
    assert search.surface[a, b] == pytest.approx(
        detection_error_prob("mem", config=cfg.replace(tau1=3, tau2=8.0)).value, rel=1e-12)


def test_optimize_ties_go_to_smallest():
    # nothing can activate a sensor, so the FC decision ignores the data and
    # an even prior makes every (tau1, tau2) pair cost exactly 1/2
    cfg = desk(alpha=0.0, delta=0.0, lam=0.0, M=0.0, prior_h0=0.5)
    search = optimize_thresholds("memoryless", range(0, 8), [3, 5], cfg)
    assert np.all(search.surface == 0.5)
    assert (search.tau1, search.tau2) == (0, 3.0)


def test_optimal_tau1_grows_with_noise():
    cfg = desk()
    picks = [optimize_thresholds("mem", range(0, cfg.N_s + 2), [8], cfg.replace(lam=lam)).tau1
             for lam in (2.0, 6.0, 10.0)]
    assert picks == sorted(picks)


def test_optimize_rejects_bad_grids():
    with pytest.raises(ValueError):
        optimize_thresholds("mem", [], [8], desk())
    with pytest.raises(ValueError):
        optimize_thresholds("mem", [0, 9], [8], desk())
