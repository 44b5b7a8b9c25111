"""Configuration, derived geometry, marker hit probabilities and tail primitives.

Everything here is a pure function of immutable inputs. Units are SI
throughout (metres, seconds, cubic metres); marker counts are molecules.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special, stats

#: ``v * a_c**2`` must sit this many times below ``D * delta_x``.
DISPERSION_MARGIN = 10.0
REYNOLDS_LAMINAR = 2300.0


class ConfigError(ValueError):
    """A configuration violates one of the model invariants."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class TailMode(enum.Enum):
    EXACT = "exact"
    GAUSS = "gauss"

    @classmethod
    def parse(cls, text: str | "TailMode") -> "TailMode":
        if isinstance(text, TailMode):
            return text
        aliases = {"exact": cls.EXACT, "exactpoisson": cls.EXACT,
                   "gauss": cls.GAUSS, "gaussian": cls.GAUSS, "gaussianapprox": cls.GAUSS}
        try:
            return aliases[text.strip().lower()]
        except KeyError:
            raise ValueError(f"unknown tail mode {text!r}") from None


@dataclass(frozen=True)
class FlowCheck:
    rho: float      # fluid density, kg/m^3
    eta: float      # dynamic viscosity, Pa s
    d_e: float      # equivalent channel diameter, m
    delta_x: float  # minimum release-to-receive distance, m


@dataclass(frozen=True)
class SystemConfig:
    """All physical and protocol parameters of one sensory region.

    ``beta`` defaults to ``M / (K_s * T)`` (a storage refills in ``K_s``
    slots) and ``K_s`` defaults to ``K + 1``. ``tau2_agg`` defaults to
    ``K * tau2``. Call :meth:`validate` (or :func:`build_geometry`) before
    use; construction itself does not check invariants so that sweeps can
    use :func:`dataclasses.replace` freely.
    """

    v: float
    a_c: float
    D: float
    T: float
    T_d: float
    x_0: float
    x_FC: float
    N_s: int
    alpha: float
    delta: float
    lam: float
    V_s: float
    V_FC: float
    M: float
    beta: Optional[float] = None
    K_s: Optional[int] = None
    tau1: int = 1
    tau2: float = 20
    tau2_agg: Optional[float] = None
    prior_h0: float = 0.1
    flow_check: Optional[FlowCheck] = None

    @property
    def K(self) -> int:
        return slot_count(self.x_0, self.x_FC, self.v, self.T)

    @property
    def storage_slots(self) -> int:
        return self.K_s if self.K_s is not None else self.K + 1

    @property
    def production_rate(self) -> float:
        if self.beta is not None:
            return float(self.beta)
        return self.M / (self.storage_slots * self.T)

    @property
    def agg_threshold(self) -> float:
        return self.tau2_agg if self.tau2_agg is not None else self.K * self.tau2

    def replace(self, **changes) -> "SystemConfig":
        return dataclasses.replace(self, **changes)

    def validate(self) -> "SystemConfig":
        positive = {"v": self.v, "T": self.T, "a_c": self.a_c, "D": self.D,
                    "V_s": self.V_s, "V_FC": self.V_FC}
        for name, value in positive.items():
            if not value > 0:
                raise ConfigError(name, f"must be > 0 (got {value!r})")
        if not 0 < self.T_d < self.T:
            raise ConfigError("T_d", f"need 0 < T_d < T (got T_d={self.T_d!r}, T={self.T!r})")
        if not self.x_FC > self.x_0:
            raise ConfigError("x_FC", "need x_FC > x_0")
        if int(self.N_s) != self.N_s or self.N_s < 1:
            raise ConfigError("N_s", "must be an integer >= 1")
        for name in ("alpha", "delta", "prior_h0"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ConfigError(name, f"must lie in [0, 1] (got {value!r})")
        if self.alpha + self.delta > 1 + 1e-12:
            raise ConfigError("alpha", "alpha + delta <= 1 violated")
        if self.lam < 0:
            raise ConfigError("lambda", "must be >= 0")
        if self.M < 0:
            raise ConfigError("M", "must be >= 0")
        if self.beta is not None and not self.beta > 0:
            raise ConfigError("beta", "must be > 0")
        if self.K_s is not None:
            if int(self.K_s) != self.K_s:
                raise ConfigError("K_s", "must be an integer")
            if self.K_s < self.K:
                raise ConfigError("K_s", f"K_s >= K violated (K_s={self.K_s}, K={self.K})")
        if self.tau1 < 0:
            raise ConfigError("tau1", "must be >= 0")
        if self.tau2 < 0:
            raise ConfigError("tau2", "must be >= 0")
        if self.tau2_agg is not None and self.tau2_agg < 0:
            raise ConfigError("tau2_agg", "must be >= 0")
        return self

    def check_storage(self) -> None:
        """Localization needs every releasing sensor to arrive with a non-full storage."""
        if self.M > 0 and not self.M > self.production_rate * self.K * self.T:
            raise ConfigError("M", "M > beta*K*T violated; storage levels cannot encode slots")


def slot_count(x_0: float, x_FC: float, v: float, T: float) -> int:
    # guard against 600/(0.02*3000) landing a hair above an integer
    ratio = (x_FC - x_0) / (v * T)
    return max(1, math.ceil(ratio - 1e-9))


@dataclass(frozen=True)
class Geometry:
    K: int
    subregion_len: float
    sampling_times: np.ndarray = field(repr=False)
    fc_scale: float
    lambda_fc: float


def build_geometry(config: SystemConfig) -> Geometry:
    config.validate()
    K = config.K
    times = np.arange(1, K + 1) * config.T + config.T_d
    fc_scale = config.V_FC / config.V_s
    return Geometry(K=K, subregion_len=config.v * config.T, sampling_times=times,
                    fc_scale=fc_scale, lambda_fc=fc_scale * config.lam)


def marker_hit_prob(j: int, i: int, receiver_volume: float, config: SystemConfig) -> float:
    """Probability that one marker released at ``j*T`` is inside a receiver of
    the given volume at sampling time ``i*T + T_d``.

    Cross-sectional concentration is taken as uniform; along the channel the
    marker cloud spreads as a 1-D Gaussian that travels with the receiver.
    """
    if i < j:
        raise ValueError(f"sample slot {i} precedes release slot {j}")
    if j < 1:
        raise ValueError("slots are 1-based")
    elapsed = (i - j) * config.T + config.T_d
    return (receiver_volume / (4 * math.pi * config.a_c ** 2)) / math.sqrt(4 * math.pi * config.D * elapsed)


def sensor_hit_matrix(config: SystemConfig) -> np.ndarray:
    """``mu[j-1, i-1]`` for release slot j and sample slot i (zero below j)."""
    K = config.K
    mu = np.zeros((K, K))
    for j in range(1, K + 1):
        for i in range(j, K + 1):
            mu[j - 1, i - 1] = marker_hit_prob(j, i, config.V_s, config)
    return mu


def fc_hit_vector(config: SystemConfig) -> np.ndarray:
    """``mu'[j-1]``: hit probability at the FC sample for a release in slot j."""
    K = config.K
    return np.array([marker_hit_prob(j, K, config.V_FC, config) for j in range(1, K + 1)])


def gaussian_tail_q(x):
    """Standard normal upper tail ``P(N(0,1) > x)``."""
    out = special.ndtr(-np.asarray(x, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def count_tail(threshold, mean, mode: TailMode = TailMode.EXACT):
    """``P(Y >= threshold)`` for ``Y ~ Poisson(mean)``, or its Gaussian surrogate.

    Works elementwise on arrays. Non-integer thresholds are compared against
    integer counts in exact mode (``Y >= ceil(threshold)``) and treated as
    continuous in Gaussian mode. A threshold ``<= 0`` is a certain event and a
    zero mean with a positive threshold is impossible, in both modes.
    """
    mode = TailMode.parse(mode)
    thr, mu = np.broadcast_arrays(np.asarray(threshold, dtype=float), np.asarray(mean, dtype=float))
    out = np.zeros(thr.shape)
    certain = thr <= 0
    live = ~certain & (mu > 0) & np.isfinite(thr)
    out[certain] = 1.0
    if np.any(live):
        if mode is TailMode.EXACT:
            out[live] = stats.poisson.sf(np.ceil(thr[live]) - 1, mu[live])
        else:
            out[live] = special.ndtr(-(thr[live] - mu[live]) / np.sqrt(mu[live]))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class FlowReport:
    status: str                      # "checked" or "unchecked"
    reynolds: Optional[float] = None
    laminar_ok: Optional[bool] = None
    dispersion_ratio: Optional[float] = None   # v a_c^2 / (D delta_x)
    dispersion_ok: Optional[bool] = None


def validate_flow_regime(config: SystemConfig) -> FlowReport:
    """Advisory laminar-flow and cross-section-mixing checks.

    The effective diffusion coefficient is taken equal to the marker ``D``.
    Never raises on a failing check.
    """
    fc = config.flow_check
    if fc is None:
        return FlowReport(status="unchecked")
    reynolds = fc.rho * config.v * fc.d_e / fc.eta
    ratio = config.v * config.a_c ** 2 / (config.D * fc.delta_x)
    return FlowReport(status="checked", reynolds=reynolds,
                      laminar_ok=bool(reynolds < REYNOLDS_LAMINAR),
                      dispersion_ratio=ratio,
                      dispersion_ok=bool(ratio * DISPERSION_MARGIN < 1.0))


@dataclass(frozen=True)
class ErrorEstimate:
    """An error probability with provenance.

    ``provenance`` is one of ``analytic-exact``, ``analytic-truncated``,
    ``analytic-sampled`` or ``mc``. ``residual_bound`` is the probability mass
    left out by a truncated enumeration (the true value lies in
    ``[value, value + residual_bound]``).
    """

    value: float
    stderr: float = 0.0
    n_trials: int = 0
    provenance: str = "analytic-exact"
    residual_bound: float = 0.0
    tail_mode: Optional[str] = None

    def __float__(self) -> float:
        return float(self.value)


def combine_estimates(weights, estimates) -> ErrorEstimate:
    """Weighted sum of independent estimates (used for prior mixing)."""
    weights = list(weights)
    estimates = list(estimates)
    value = math.fsum(w * e.value for w, e in zip(weights, estimates))
    stderr = math.sqrt(math.fsum((w * e.stderr) ** 2 for w, e in zip(weights, estimates)))
    resid = math.fsum(w * e.residual_bound for w, e in zip(weights, estimates))
    provs = {e.provenance for e in estimates}
    prov = provs.pop() if len(provs) == 1 else "+".join(sorted(provs))
    return ErrorEstimate(value=value, stderr=stderr,
                         n_trials=sum(e.n_trials for e in estimates),
                         provenance=prov, residual_bound=resid,
                         tail_mode=estimates[0].tail_mode if estimates else None)


def reference_config(**overrides) -> SystemConfig:
    """Reference parameter set (K = 10); keyword overrides replace single fields."""
    base = dict(v=0.02, a_c=0.05, D=1e-6, T=3000.0, T_d=2700.0, x_0=0.0, x_FC=600.0,
                N_s=20, alpha=0.3, delta=0.002, lam=5.0, V_s=1e-9, V_FC=1e-9,
                M=1e7, tau1=1, tau2=20, prior_h0=0.1)
    base.update(overrides)
    return SystemConfig(**base)
