"""Subregion localization at the fusion center.

Type-A FCs see which sensors arrived with a non-full storage plus one marker
count sample, and split the count axis with thresholds ``gamma``. Type-B FCs
read exact storage levels, recover the per-slot source vector and apply a
maximum-likelihood rule. Localization is only attempted after detection, so
every error probability here is conditioned on at least one source in the
abnormality slot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .core import ConfigError, ErrorEstimate, SystemConfig, TailMode, count_tail, fc_hit_vector
from .detection import (BudgetExceeded, EnumerationPolicy, _log_pmf_rows, count_source_vectors,
                        slot_probs_h1, source_matrix)


@dataclass(frozen=True)
class ThresholdVector:
    """``gamma[0] = 0 < gamma[1] < ... < gamma[K-1] < gamma[K] = inf``."""

    gamma: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=float)
        if g.ndim != 1 or g.size < 2:
            raise ValueError("need at least gamma_0 and gamma_K")
        if g[0] != 0 or not np.isinf(g[-1]):
            raise ValueError("endpoints must be 0 and inf")
        if np.any(np.diff(g) <= 0):
            raise ValueError("thresholds must be strictly increasing")
        object.__setattr__(self, "gamma", g)

    @classmethod
    def from_interior(cls, interior: Sequence[float]) -> "ThresholdVector":
        return cls(np.concatenate([[0.0], np.asarray(interior, dtype=float), [np.inf]]))

    @property
    def K(self) -> int:
        return self.gamma.size - 1


def fc_marker_mean(r: Sequence[int], config: SystemConfig) -> float:
    """Expected FC marker count for source vector ``r``."""
    r = np.asarray(r, dtype=float)
    lam_fc = config.lam * config.V_FC / config.V_s
    return float(config.M * (r @ fc_hit_vector(config)) + lam_fc)


def decide_subregion_type_a(z, thresholds: ThresholdVector):
    """Slot ``j`` with ``gamma[j-1] <= z < gamma[j]``; works on arrays."""
    out = np.searchsorted(thresholds.gamma, np.asarray(z, dtype=float), side="right")
    return int(out) if np.ndim(out) == 0 else out


def _optimal_interior(n_active, M, mu_fc, lam_fc):
    """Interior thresholds for every entry of ``n_active``; shape (len, K-1).

    Equal-density crossing of adjacent Gaussian hypotheses whose variance
    equals their mean.
    """
    n = np.atleast_1d(np.asarray(n_active, dtype=float))[:, None]
    lo = n * M * mu_fc[None, :-1] + lam_fc
    hi = n * M * mu_fc[None, 1:] + lam_fc
    gap = n * M * (mu_fc[None, 1:] - mu_fc[None, :-1])
    if np.any(gap <= 0):
        raise ValueError("adjacent FC hit probabilities must be strictly increasing with positive signal")
    # log(hi/lo) via log1p keeps precision when the ratio is close to 1
    return np.sqrt(lo * hi * (np.log1p(gap / lo) / gap + 1.0))


def optimal_thresholds_type_a(r_active: int, config: SystemConfig) -> ThresholdVector:
    """Thresholds minimising the Gaussian-approximated error when ``r_active``
    sensors, all activated in the same (unknown) slot, released markers."""
    if r_active < 1:
        raise ValueError("need at least one releasing sensor")
    mu_fc = fc_hit_vector(config)
    lam_fc = config.lam * config.V_FC / config.V_s
    return ThresholdVector.from_interior(_optimal_interior(r_active, config.M, mu_fc, lam_fc)[0])


def _threshold_table(config: SystemConfig) -> np.ndarray:
    """Row ``n`` holds the full gamma vector for ``n`` releasing sensors (row 0 unused)."""
    K, N_s = config.K, config.N_s
    table = np.zeros((N_s + 1, K + 1))
    table[:, K] = np.inf
    if K > 1 and config.M == 0:
        # markers carry nothing: every increasing split of the count axis is
        # equally (un)informative, so any fixed one will do
        table[1:, 1:K] = np.arange(1, K)[None, :] * max(1.0, config.lam * config.V_FC / config.V_s)
    elif K > 1:
        mu_fc = fc_hit_vector(config)
        lam_fc = config.lam * config.V_FC / config.V_s
        table[1:, 1:K] = _optimal_interior(np.arange(1, N_s + 1), config.M, mu_fc, lam_fc)
    return table


def _correct_prob(lo, hi, mean, tail_mode: TailMode):
    return count_tail(lo, mean, tail_mode) - count_tail(hi, mean, tail_mode)


def _require_alpha(config: SystemConfig):
    if config.alpha + config.delta <= 0:
        raise ConfigError("alpha", "no sensor can be activated at the abnormality; localization undefined")


def perfect_error_table(tail_mode: TailMode, config: SystemConfig) -> np.ndarray:
    """``E[r-1, j-1]``: type-A error with ``r`` sources, all in slot ``j``."""
    K, N_s = config.K, config.N_s
    if K == 1:
        return np.zeros((N_s, 1))
    mu_fc = fc_hit_vector(config)
    lam_fc = config.lam * config.V_FC / config.V_s
    gam = _threshold_table(config)[1:]                # (N_s, K+1)
    r = np.arange(1, N_s + 1)[:, None]
    mean = r * config.M * mu_fc[None, :] + lam_fc      # (N_s, K)
    ok = _correct_prob(gam[:, :-1], gam[:, 1:], mean, tail_mode)
    return 1.0 - ok


def _truncated_binomial(n: int, p: float) -> np.ndarray:
    """pmf of Binomial(n, p) on 1..n conditioned on being >= 1."""
    k = np.arange(1, n + 1)
    pmf = stats.binom.pmf(k, n, p)
    return pmf / pmf.sum()


def localization_error_perfect(tail_mode=TailMode.EXACT, config: SystemConfig = None) -> ErrorEstimate:
    """Type-A error with perfect sensing (no sensor noise).

    The abnormality slot is uniform and the number of directly activated
    sensors is binomial conditioned on at least one.
    """
    tail_mode = TailMode.parse(tail_mode)
    if config.alpha <= 0:
        raise ConfigError("alpha", "alpha = 0: nothing is ever detected, localization undefined")
    config.check_storage()
    K = config.K
    if K == 1:
        return ErrorEstimate(0.0, tail_mode=tail_mode.value)
    err = perfect_error_table(tail_mode, config)
    w = _truncated_binomial(config.N_s, config.alpha)
    value = math.fsum((w[:, None] * err).ravel()) / K
    return ErrorEstimate(value=value, tail_mode=tail_mode.value)


@dataclass
class _Conditioned:
    R: np.ndarray
    w: np.ndarray
    provenance: str
    residual: float
    n: int


def _h1_vectors(j: int, config: SystemConfig, policy: EnumerationPolicy) -> _Conditioned:
    """Source vectors under an abnormality in slot ``j`` conditioned on ``r_j >= 1``."""
    K, N_s = config.K, config.N_s
    probs = slot_probs_h1(j, config)
    p_hit = 1.0 - (1.0 - probs.p[j - 1]) ** N_s
    if policy.mode in ("exact", "truncated"):
        if policy.mode == "exact" and count_source_vectors(N_s, K) > policy.budget:
            raise BudgetExceeded(f"{count_source_vectors(N_s, K)} source vectors exceed the exact "
                                 f"budget {policy.budget}; use truncated:<cap> or sampled:<n>")
        cap = None if policy.mode == "exact" else policy.cap
        R = source_matrix(N_s, K, cap)
        R = R[R[:, j - 1] >= 1]
        w = np.exp(_log_pmf_rows(R, probs.p, N_s)) / p_hit
        resid = 0.0
        prov = "analytic-exact"
        if policy.mode == "truncated":
            resid = max(0.0, 1.0 - math.fsum(w))
            prov = "analytic-truncated"
        return _Conditioned(R, w, prov, resid, 0)
    if policy.mode == "sampled":
        rng = np.random.default_rng([policy.seed, 1000 + j])
        kept = []
        need = policy.n
        while need > 0:
            draws = rng.multinomial(N_s, probs.p, size=max(need * 2, 64))[:, :K]
            draws = draws[draws[:, j - 1] >= 1][:need]
            kept.append(draws)
            need -= len(draws)
        R, counts = np.unique(np.vstack(kept), axis=0, return_counts=True)
        return _Conditioned(R, counts / policy.n, "analytic-sampled", 0.0, policy.n)
    raise ValueError(f"unknown policy mode {policy.mode!r}")


def _average(per_j_cond, per_j_vecs, K, tail_mode) -> ErrorEstimate:
    values, var = [], []
    for cond, cv in zip(per_j_cond, per_j_vecs):
        v = math.fsum(cv.w * cond)
        values.append(v)
        if cv.provenance == "analytic-sampled":
            var.append(max(math.fsum(cv.w * cond ** 2) - v * v, 0.0) / max(cv.n - 1, 1))
        else:
            var.append(0.0)
    prov = per_j_vecs[0].provenance
    return ErrorEstimate(value=math.fsum(values) / K, stderr=math.sqrt(math.fsum(var)) / K,
                         n_trials=sum(cv.n for cv in per_j_vecs), provenance=prov,
                         residual_bound=math.fsum(cv.residual for cv in per_j_vecs) / K,
                         tail_mode=tail_mode.value if tail_mode else None)


@dataclass(frozen=True)
class ImperfectTypeAResult:
    estimate: ErrorEstimate
    upper_bound: float


def localization_error_imperfect_type_a(tail_mode=TailMode.EXACT, policy=EnumerationPolicy(),
                                        config: SystemConfig = None) -> ImperfectTypeAResult:
    """Type-A error with sensor noise, using thresholds designed for
    ``sum(r)`` sources as if they all sat in one slot.

    Also returns the closed-form bound
    ``1 - p_N3(0) * (1 - perfect error)`` averaged over the abnormality slot
    and the number of sources there.
    """
    tail_mode = TailMode.parse(tail_mode)
    _require_alpha(config)
    config.check_storage()
    K, N_s = config.K, config.N_s
    if K == 1:
        return ImperfectTypeAResult(ErrorEstimate(0.0, tail_mode=tail_mode.value), 0.0)
    mu_fc = fc_hit_vector(config)
    lam_fc = config.lam * config.V_FC / config.V_s
    table = _threshold_table(config)
    conds, vecs = [], []
    for j in range(1, K + 1):
        cv = _h1_vectors(j, config, policy)
        n = cv.R.sum(axis=1)
        mean = config.M * (cv.R @ mu_fc) + lam_fc
        ok = _correct_prob(table[n, j - 1], table[n, j], mean, tail_mode)
        conds.append(1.0 - ok)
        vecs.append(cv)
    est = _average(conds, vecs, K, tail_mode)
    return ImperfectTypeAResult(est, _imperfect_bound(tail_mode, config))


def _imperfect_bound(tail_mode: TailMode, config: SystemConfig) -> float:
    K, N_s, d = config.K, config.N_s, config.delta
    err = perfect_error_table(tail_mode, config)          # (N_s, K)
    total = []
    r = np.arange(1, N_s + 1)
    for j in range(1, K + 1):
        p_j = slot_probs_h1(j, config).p[j - 1]
        w = _truncated_binomial(N_s, p_j)
        p_clean = (1.0 - d) ** (N_s * (K - 1) - r * (K - j))
        total.append(math.fsum(w * (1.0 - p_clean * (1.0 - err[:, j - 1]))))
    return math.fsum(total) / K


# ---------------------------------------------------------------------------
# type-B: storage levels

def _ml_log_weights(config: SystemConfig):
    a, d = config.alpha, config.delta
    if d <= 0:
        raise ValueError("the ML rule needs delta > 0; with perfect sensing use storage_to_slot")
    if a >= 1 - d:
        raise ValueError("the ML rule needs alpha < 1 - delta")
    return math.log1p(a / d), -math.log1p(-a / (1 - d))


def ml_objective(R: np.ndarray, config: SystemConfig) -> np.ndarray:
    """Log of the ML objective for each slot m, shape (rows, K)."""
    gain, drift = _ml_log_weights(config)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    return gain * R + drift * np.cumsum(R, axis=1)


def _last_argmax(scores: np.ndarray) -> np.ndarray:
    best = scores.max(axis=1, keepdims=True)
    tol = 1e-12 * np.maximum(1.0, np.abs(best))
    hit = scores >= best - tol
    K = scores.shape[1]
    return K - np.argmax(hit[:, ::-1], axis=1)


def ml_decide_type_b(r: Sequence[int], config: SystemConfig) -> int:
    """ML subregion from the recovered source vector; ties go to the latest slot."""
    r = np.asarray(r)
    if r.sum() < 1:
        raise ValueError("need at least one source")
    return int(_last_argmax(ml_objective(r, config))[0])


def ml_decide_type_b_batch(R: np.ndarray, config: SystemConfig) -> np.ndarray:
    return _last_argmax(ml_objective(R, config))


def argmax_decide_type_b(r: Sequence[int]) -> int:
    """Latest slot holding the most sources."""
    r = np.asarray(r, dtype=float)
    if r.sum() < 1:
        raise ValueError("need at least one source")
    return int(_last_argmax(r[None, :])[0])


def argmax_matches_ml(config: SystemConfig) -> bool:
    """Whether ``(1 + a/d) (1 - a/(1-d))**(N_s-1) > 1`` (evaluated in logs)."""
    return argmax_ml_log_margin(config) > 0


def argmax_ml_log_margin(config: SystemConfig) -> float:
    gain, drift = _ml_log_weights(config)
    return gain - (config.N_s - 1) * drift


def localization_error_type_b(policy=EnumerationPolicy(), config: SystemConfig = None) -> ErrorEstimate:
    """ML-rule error for a storage-reading FC; exactly zero with perfect sensing."""
    _require_alpha(config)
    config.check_storage()
    if config.delta == 0 or config.K == 1:
        return ErrorEstimate(0.0)
    K = config.K
    conds, vecs = [], []
    for j in range(1, K + 1):
        cv = _h1_vectors(j, config, policy)
        conds.append((ml_decide_type_b_batch(cv.R, config) != j).astype(float))
        vecs.append(cv)
    return _average(conds, vecs, K, None)


def storage_level(activation_slot, config: SystemConfig):
    """Storage level at the FC of a sensor that released after slot ``activation_slot``."""
    beta = config.production_rate
    level = np.minimum(config.M, beta * (config.K - np.asarray(activation_slot, dtype=float)) * config.T)
    return float(level) if np.ndim(level) == 0 else level


def storage_to_slot(level, config: SystemConfig):
    """Activation slot encoded by a storage level (charging from the end of the
    activation slot to arrival at ``K*T``)."""
    level = np.asarray(level, dtype=float)
    if np.any(level >= config.M) or np.any(level < 0):
        raise ValueError("a full (or negative) storage does not encode an activation slot")
    beta = config.production_rate
    slot = np.clip(np.rint(config.K - level / (beta * config.T)), 1, config.K).astype(int)
    return int(slot) if slot.ndim == 0 else slot
