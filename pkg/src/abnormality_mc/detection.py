"""Closed-form detection error probabilities for memoryless and aggregate sensors.

The fusion center counts active sensors and alarms when the count reaches
``tau1``. Sensors activated by the abnormality or by sensor noise (the marker
*sources*, one count per slot in a source vector ``r``) release markers; every
other sensor may be activated cooperatively by sampling those markers.
Conditional on ``r`` the cooperative count is binomial, so the error
probabilities are multinomial-weighted sums over source vectors.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import special, stats

from .core import (ErrorEstimate, SystemConfig, TailMode, combine_estimates,
                   count_tail, sensor_hit_matrix)

DEFAULT_BUDGET = 2_000_000


class SensorType(enum.Enum):
    MEMORYLESS = "memoryless"
    AGGREGATE = "aggregate"

    @classmethod
    def parse(cls, text) -> "SensorType":
        if isinstance(text, SensorType):
            return text
        key = str(text).strip().lower()
        for member in cls:
            if member.value.startswith(key[:3]):
                return member
        raise ValueError(f"unknown sensor type {text!r}")


@dataclass(frozen=True)
class SlotProbs:
    """Per-slot first-activation probabilities; ``p[K]`` is 'never activated'."""

    p: np.ndarray
    hypothesis: str = "H0"
    j_star: Optional[int] = None

    def __post_init__(self):
        if np.any(self.p < -1e-15) or np.any(self.p > 1 + 1e-15):
            raise ValueError("slot probabilities must lie in [0, 1]")
        if abs(math.fsum(self.p) - 1.0) > 1e-12:
            raise ValueError("slot probabilities must sum to 1")


@dataclass(frozen=True)
class EnumerationPolicy:
    """How the sum over source vectors is realised.

    ``exact`` visits every vector (refused above ``budget`` vectors),
    ``truncated`` keeps vectors with at most ``cap`` sources and reports the
    omitted mass, ``sampled`` averages over ``n`` multinomial draws.
    """

    mode: str = "exact"
    cap: Optional[int] = None
    n: Optional[int] = None
    seed: int = 0
    budget: int = DEFAULT_BUDGET

    @classmethod
    def exact(cls, budget: int = DEFAULT_BUDGET) -> "EnumerationPolicy":
        return cls("exact", budget=budget)

    @classmethod
    def truncated(cls, cap: int) -> "EnumerationPolicy":
        return cls("truncated", cap=int(cap))

    @classmethod
    def sampled(cls, n: int, seed: int = 0) -> "EnumerationPolicy":
        return cls("sampled", n=int(n), seed=int(seed))

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "EnumerationPolicy":
        if isinstance(text, EnumerationPolicy):
            return text
        name, _, arg = str(text).partition(":")
        name = name.strip().lower()
        if name == "exact":
            return cls.exact()
        if name == "truncated" and arg:
            return cls.truncated(int(arg))
        if name == "sampled" and arg:
            return cls.sampled(int(float(arg)), seed)
        raise ValueError(f"bad policy {text!r}; use exact, truncated:<cap> or sampled:<n>")

    def label(self) -> str:
        if self.mode == "truncated":
            return f"truncated:{self.cap}"
        if self.mode == "sampled":
            return f"sampled:{self.n}"
        return "exact"


class BudgetExceeded(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# slot probabilities and the multinomial law of R

def slot_probs_h0(config: SystemConfig) -> SlotProbs:
    K, d = config.K, config.delta
    i = np.arange(1, K + 1)
    p = np.append(d * (1 - d) ** (i - 1), (1 - d) ** K)
    return SlotProbs(p=p, hypothesis="H0")


def slot_probs_h1(j_star: int, config: SystemConfig) -> SlotProbs:
    """Slot probabilities with the abnormality in slot ``j_star``.

    At ``j_star`` a sensor fires with probability ``alpha + delta`` (the two
    causes are exclusive); after it, survivors of that slot carry the factor
    ``1 - alpha - delta``.
    """
    K, a, d = config.K, config.alpha, config.delta
    if not 1 <= j_star <= K:
        raise ValueError(f"j_star must lie in [1, {K}]")
    p = np.empty(K + 1)
    for i in range(1, K + 1):
        if i < j_star:
            p[i - 1] = d * (1 - d) ** (i - 1)
        elif i == j_star:
            p[i - 1] = (a + d) * (1 - d) ** (j_star - 1)
        else:
            p[i - 1] = d * (1 - a - d) * (1 - d) ** (i - 2)
    p[K] = (1 - a - d) * (1 - d) ** (K - 1)
    return SlotProbs(p=p, hypothesis="H1", j_star=j_star)


def _log_pmf_rows(R: np.ndarray, p: np.ndarray, N_s: int) -> np.ndarray:
    R = np.atleast_2d(R)
    rest = N_s - R.sum(axis=1)
    counts = np.column_stack([R, rest])
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.log(p)
        # 0 * log(0) contributes nothing
        terms = np.where(counts > 0, counts * logp, 0.0)
    return special.gammaln(N_s + 1) - special.gammaln(counts + 1).sum(axis=1) + terms.sum(axis=1)


def source_vector_pmf(r: Sequence[int], probs: SlotProbs, config: SystemConfig) -> float:
    r = np.asarray(r, dtype=int)
    if r.shape != (config.K,):
        raise ValueError(f"source vector must have length K={config.K}")
    if np.any(r < 0) or r.sum() > config.N_s:
        raise ValueError("source vector needs non-negative entries summing to <= N_s")
    return float(np.exp(_log_pmf_rows(r, probs.p, config.N_s))[0])


def _compositions(total: int, parts: int) -> Iterator[tuple]:
    # stars and bars; reversed so the first slot takes the most sources first
    for bars in reversed(list(itertools.combinations(range(total + parts - 1), parts - 1))):
        prev = -1
        out = []
        for b in bars:
            out.append(b - prev - 1)
            prev = b
        out.append(total + parts - 2 - prev)
        yield tuple(out)


def count_source_vectors(N_s: int, K: int, cap: Optional[int] = None) -> int:
    top = N_s if cap is None else min(cap, N_s)
    return math.comb(top + K, K)


def enumerate_source_vectors(config: SystemConfig, policy: EnumerationPolicy = EnumerationPolicy(),
                             probs: Optional[SlotProbs] = None) -> Iterator[tuple]:
    """Yield source vectors (tuples of length K) according to ``policy``."""
    K, N_s = config.K, config.N_s
    if policy.mode == "exact":
        total = count_source_vectors(N_s, K)
        if total > policy.budget:
            raise BudgetExceeded(
                f"{total} source vectors exceed the exact budget {policy.budget}; "
                "use a truncated:<cap> or sampled:<n> policy")
        top = N_s
    elif policy.mode == "truncated":
        top = min(policy.cap, N_s)
    elif policy.mode == "sampled":
        if probs is None:
            raise ValueError("sampled enumeration needs slot probabilities")
        rng = np.random.default_rng(policy.seed)
        for row in rng.multinomial(N_s, probs.p, size=policy.n):
            yield tuple(int(x) for x in row[:K])
        return
    else:
        raise ValueError(f"unknown policy mode {policy.mode!r}")
    for s in range(top + 1):
        yield from _compositions(s, K)


def source_matrix(N_s: int, K: int, cap: Optional[int] = None) -> np.ndarray:
    top = N_s if cap is None else min(cap, N_s)
    rows = [c for s in range(top + 1) for c in _compositions(s, K)]
    return np.array(rows, dtype=np.int64).reshape(-1, K)


def truncation_residual(probs: SlotProbs, N_s: int, cap: int) -> float:
    """``P(sum r > cap)``: the mass dropped by a truncated enumeration."""
    return float(stats.binom.sf(cap, N_s, 1.0 - probs.p[-1]))


# ---------------------------------------------------------------------------
# cooperative activation

def _marker_means(R: np.ndarray, config: SystemConfig, mu: np.ndarray) -> np.ndarray:
    """Per-slot expected marker counts at a sensor, shape (rows, K)."""
    return config.M * (np.atleast_2d(R) @ mu) + config.lam


def activation_probs(R: np.ndarray, sensor_type: SensorType, tail_mode: TailMode,
                     config: SystemConfig, threshold: Optional[float] = None,
                     mu: Optional[np.ndarray] = None) -> np.ndarray:
    """Vectorised :func:`marker_activation_prob` over the rows of ``R``."""
    sensor_type = SensorType.parse(sensor_type)
    mu = sensor_hit_matrix(config) if mu is None else mu
    means = _marker_means(R, config, mu)
    if sensor_type is SensorType.MEMORYLESS:
        thr = config.tau2 if threshold is None else threshold
        per_slot = count_tail(thr, means, tail_mode)
        # 1 - prod(1 - q) without cancellation when q is tiny
        with np.errstate(divide="ignore"):
            log_quiet = np.log1p(-np.minimum(per_slot, 1.0)).sum(axis=1)
        return -np.expm1(log_quiet)
    thr = config.agg_threshold if threshold is None else threshold
    return np.atleast_1d(count_tail(thr, means.sum(axis=1), tail_mode))


def marker_activation_prob(r: Sequence[int], sensor_type: SensorType, tail_mode: TailMode,
                           config: SystemConfig) -> float:
    """Probability that a sensor outside the source set is activated by markers
    before it reaches the FC, given source vector ``r``."""
    R = np.asarray(r, dtype=float).reshape(1, -1)
    return float(activation_probs(R, sensor_type, TailMode.parse(tail_mode), config)[0])


def alarm_probs(n1: np.ndarray, p_active: np.ndarray, N_s: int, tau1) -> np.ndarray:
    """``P(N_T >= tau1 | r)`` where ``N_T = n1 + Binomial(N_s - n1, p_active)``.

    ``tau1`` may be an array; the result then has shape (len(tau1), rows).
    """
    tau1 = np.atleast_1d(np.asarray(tau1))[:, None]
    need = tau1 - n1[None, :] - 1
    out = stats.binom.sf(need, (N_s - n1)[None, :], p_active[None, :])
    out = np.where(need < 0, 1.0, out)
    return out


# ---------------------------------------------------------------------------
# error probabilities

@dataclass
class _Weighted:
    R: np.ndarray
    w: np.ndarray
    provenance: str
    residual: float
    n: int


def _weighted_vectors(probs: SlotProbs, config: SystemConfig, policy: EnumerationPolicy,
                      stream: int = 0) -> _Weighted:
    K, N_s = config.K, config.N_s
    if policy.mode == "exact":
        total = count_source_vectors(N_s, K)
        if total > policy.budget:
            raise BudgetExceeded(
                f"{total} source vectors exceed the exact budget {policy.budget}; "
                "use a truncated:<cap> or sampled:<n> policy")
        R = source_matrix(N_s, K)
        return _Weighted(R, np.exp(_log_pmf_rows(R, probs.p, N_s)), "analytic-exact", 0.0, 0)
    if policy.mode == "truncated":
        R = source_matrix(N_s, K, policy.cap)
        resid = truncation_residual(probs, N_s, policy.cap)
        return _Weighted(R, np.exp(_log_pmf_rows(R, probs.p, N_s)), "analytic-truncated", resid, 0)
    if policy.mode == "sampled":
        rng = np.random.default_rng([policy.seed, stream])
        draws = rng.multinomial(N_s, probs.p, size=policy.n)[:, :K]
        R, counts = np.unique(draws, axis=0, return_counts=True)
        return _Weighted(R, counts / policy.n, "analytic-sampled", 0.0, policy.n)
    raise ValueError(f"unknown policy mode {policy.mode!r}")


def _estimate(cond: np.ndarray, wv: _Weighted, tail_mode: TailMode) -> ErrorEstimate:
    value = math.fsum(wv.w * cond)
    stderr = 0.0
    if wv.provenance == "analytic-sampled":
        second = math.fsum(wv.w * cond ** 2)
        stderr = math.sqrt(max(second - value ** 2, 0.0) / max(wv.n - 1, 1))
    return ErrorEstimate(value=value, stderr=stderr, n_trials=wv.n, provenance=wv.provenance,
                         residual_bound=wv.residual, tail_mode=tail_mode.value)


def _fa_surface(sensor_type, tail_mode, policy, config, tau1s, tau2s, mu):
    wv = _weighted_vectors(slot_probs_h0(config), config, policy, stream=0)
    n1 = wv.R.sum(axis=1)
    out = []
    for t2 in tau2s:
        pa = activation_probs(wv.R, sensor_type, tail_mode, config, t2, mu)
        alarm = alarm_probs(n1, pa, config.N_s, tau1s)
        out.append([_estimate(row, wv, tail_mode) for row in alarm])
    return out  # [tau2][tau1]


def _md_surface(sensor_type, tail_mode, policy, config, tau1s, tau2s, mu):
    K = config.K
    per_j = []
    for j in range(1, K + 1):
        wv = _weighted_vectors(slot_probs_h1(j, config), config, policy, stream=j)
        n1 = wv.R.sum(axis=1)
        rows = []
        for t2 in tau2s:
            pa = activation_probs(wv.R, sensor_type, tail_mode, config, t2, mu)
            miss = 1.0 - alarm_probs(n1, pa, config.N_s, tau1s)
            rows.append([_estimate(row, wv, tail_mode) for row in miss])
        per_j.append(rows)
    return [[combine_estimates([1.0 / K] * K, [per_j[j][a][b] for j in range(K)])
             for b in range(len(tau1s))] for a in range(len(tau2s))]


def false_alarm_prob(sensor_type, tail_mode=TailMode.EXACT, policy=EnumerationPolicy(),
                     config: SystemConfig = None) -> ErrorEstimate:
    """``P(N_T >= tau1 | H0)``."""
    sensor_type, tail_mode = SensorType.parse(sensor_type), TailMode.parse(tail_mode)
    thr = _threshold(sensor_type, config)
    return _fa_surface(sensor_type, tail_mode, policy, config, [config.tau1], [thr],
                       sensor_hit_matrix(config))[0][0]


def miss_detection_prob(sensor_type, tail_mode=TailMode.EXACT, policy=EnumerationPolicy(),
                        config: SystemConfig = None) -> ErrorEstimate:
    """``P(N_T < tau1 | H1)`` averaged over a uniformly placed abnormality slot."""
    sensor_type, tail_mode = SensorType.parse(sensor_type), TailMode.parse(tail_mode)
    thr = _threshold(sensor_type, config)
    return _md_surface(sensor_type, tail_mode, policy, config, [config.tau1], [thr],
                       sensor_hit_matrix(config))[0][0]


def detection_error_prob(sensor_type, tail_mode=TailMode.EXACT, policy=EnumerationPolicy(),
                         config: SystemConfig = None) -> ErrorEstimate:
    p0 = config.prior_h0
    fa = false_alarm_prob(sensor_type, tail_mode, policy, config)
    md = miss_detection_prob(sensor_type, tail_mode, policy, config)
    return combine_estimates([p0, 1.0 - p0], [fa, md])


def _threshold(sensor_type: SensorType, config: SystemConfig) -> float:
    return config.tau2 if sensor_type is SensorType.MEMORYLESS else config.agg_threshold


@dataclass
class ThresholdSearch:
    tau1: int
    tau2: float
    pe: float
    tau1_grid: np.ndarray
    tau2_grid: np.ndarray
    surface: np.ndarray        # P_e^D, shape (len(tau1_grid), len(tau2_grid))
    fa_surface: np.ndarray
    md_surface: np.ndarray
    stderr_surface: np.ndarray


def optimize_thresholds(sensor_type, tau1_grid, tau2_grid, config: SystemConfig,
                        tail_mode=TailMode.EXACT, policy=EnumerationPolicy()) -> ThresholdSearch:
    """Exhaustive grid search of ``P_e^D`` over (tau1, tau2) or (tau1, tau2_agg).

    Ties go to the smallest tau1, then the smallest tau2.
    """
    sensor_type, tail_mode = SensorType.parse(sensor_type), TailMode.parse(tail_mode)
    tau1s = np.asarray(sorted(tau1_grid), dtype=int)
    tau2s = np.asarray(sorted(tau2_grid), dtype=float)
    if tau1s.size == 0 or tau2s.size == 0:
        raise ValueError("threshold grids must be non-empty")
    if tau1s[0] < 0 or tau1s[-1] > config.N_s + 1:
        raise ValueError("tau1 grid must lie within [0, N_s + 1]")
    mu = sensor_hit_matrix(config)
    fa = _fa_surface(sensor_type, tail_mode, policy, config, tau1s, tau2s, mu)
    md = _md_surface(sensor_type, tail_mode, policy, config, tau1s, tau2s, mu)
    p0 = config.prior_h0
    shape = (len(tau1s), len(tau2s))
    pe, fa_s, md_s, se = (np.empty(shape) for _ in range(4))
    for b in range(len(tau2s)):
        for a in range(len(tau1s)):
            est = combine_estimates([p0, 1 - p0], [fa[b][a], md[b][a]])
            pe[a, b], fa_s[a, b], md_s[a, b], se[a, b] = est.value, fa[b][a].value, md[b][a].value, est.stderr
    # np.argmin on the row-major (tau1, tau2) layout returns the first minimum,
    # which is the smallest tau1 then smallest tau2
    a, b = np.unravel_index(int(np.argmin(pe)), shape)
    return ThresholdSearch(tau1=int(tau1s[a]), tau2=float(tau2s[b]), pe=float(pe[a, b]),
                           tau1_grid=tau1s, tau2_grid=tau2s, surface=pe,
                           fa_surface=fa_s, md_surface=md_s, stderr_surface=se)
