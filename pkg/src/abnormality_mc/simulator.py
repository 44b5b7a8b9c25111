"""Discrete-time Monte-Carlo simulation of one sensory region.

Each trial walks the ``N_s`` sensors through the ``K`` slots:

1. every sensor that has not yet fired on its own may fire on the
   abnormality (slot ``J*`` only, probability ``alpha``) or on sensor noise
   (probability ``delta``); the two causes are drawn from one uniform so they
   are exclusive. A sensor already switched on by markers can still fire on
   its own and then releases like any other source, so the per-slot source
   counts follow the same multinomial law as the closed-form model (set
   ``Scenario.marker_blocks_sensing`` to freeze marker-activated sensors
   instead);
2. sensors that fired in slot ``i`` release ``M`` markers at ``i*T``;
3. at ``i*T + T_d`` every still-inactive sensor draws a Poisson marker count
   whose mean sums all releases so far, and may activate cooperatively
   (memoryless: this sample reaches ``tau2``; aggregate: the running sum
   reaches ``tau2_agg``). Cooperatively activated sensors never release;
4. at the end the FC reads flags and storage levels and draws its own
   Poisson marker sample at the last sampling time.

Trials are simulated in fixed-size chunks. Chunk ``c`` of a run with root
seed ``s`` draws from ``SeedSequence(s).spawn(...)[c]``, so results do not
depend on how many workers process the chunks.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .core import ErrorEstimate, SystemConfig, combine_estimates, fc_hit_vector, sensor_hit_matrix
from .detection import SensorType
from .localization import (_threshold_table, ml_decide_type_b_batch,
                           storage_to_slot)

CHUNK = 4096

NONE, DIRECT, NOISE, MARKER = 0, 1, 2, 3
CAUSES = {NONE: "none", DIRECT: "direct", NOISE: "noise", MARKER: "marker"}


@dataclass(frozen=True)
class Scenario:
    """What one batch of trials simulates.

    ``j_star`` is a slot index or ``"uniform"`` (drawn per trial). Set
    ``cooperative=False`` to switch off marker-driven activation, as done for
    localization runs. ``marker_blocks_sensing=True`` stops a sensor that was
    activated by markers from later firing on its own.
    """

    hypothesis: str = "H1"
    j_star: Union[int, str] = "uniform"
    sensor_type: SensorType = SensorType.MEMORYLESS
    fc_type: str = "A"
    seed: int = 0
    cooperative: bool = True
    marker_blocks_sensing: bool = False

    def __post_init__(self):
        if self.hypothesis not in ("H0", "H1"):
            raise ValueError("hypothesis must be H0 or H1")
        object.__setattr__(self, "sensor_type", SensorType.parse(self.sensor_type))
        fc = str(self.fc_type).upper().replace("TYPE", "").strip("-_ ")
        if fc not in ("A", "B"):
            raise ValueError("fc_type must be A or B")
        object.__setattr__(self, "fc_type", fc)


@dataclass
class SensorRecord:
    flag: int
    cause: str
    activation_slot: Optional[int]
    storage_level: float


@dataclass
class TrialOutcome:
    j_star: Optional[int]
    sensors: list
    source_vector: np.ndarray
    n_total_active: int
    n_released: int
    z_fc: int
    detected: bool
    loc_type_a: Optional[int]
    loc_type_b: Optional[int]

    @property
    def storage_levels(self) -> np.ndarray:
        return np.array([s.storage_level for s in self.sensors])


@dataclass
class TrialBatch:
    """Arrays describing ``n`` trials; sensor arrays have shape (n, N_s)."""

    j_star: np.ndarray            # 0 under H0
    cause: np.ndarray
    slot: np.ndarray              # activation slot, 0 if never
    levels: np.ndarray
    sources: np.ndarray           # (n, K) direct + noise activations per slot
    z_fc: np.ndarray
    n_active: np.ndarray = field(init=False)
    n_released: np.ndarray = field(init=False)

    def __post_init__(self):
        self.n_active = (self.cause != NONE).sum(axis=1)
        self.n_released = self.sources.sum(axis=1)

    def __len__(self):
        return len(self.j_star)


def simulate_batch(scenario: Scenario, config: SystemConfig, n: int,
                   rng: np.random.Generator) -> TrialBatch:
    K, N = config.K, config.N_s
    a, d = config.alpha, config.delta
    mu = sensor_hit_matrix(config)
    mu_fc = fc_hit_vector(config)
    lam_fc = config.lam * config.V_FC / config.V_s

    if scenario.hypothesis == "H0":
        j_star = np.zeros(n, dtype=np.int64)
    elif scenario.j_star == "uniform":
        j_star = rng.integers(1, K + 1, size=n)
    else:
        j_star = np.full(n, int(scenario.j_star), dtype=np.int64)

    cause = np.zeros((n, N), dtype=np.int8)
    slot = np.zeros((n, N), dtype=np.int64)
    sources = np.zeros((n, K), dtype=np.int64)
    running = np.zeros((n, N))
    memoryless = scenario.sensor_type is SensorType.MEMORYLESS
    thr = config.tau2 if memoryless else config.agg_threshold

    for i in range(1, K + 1):
        eligible = cause == NONE
        if not scenario.marker_blocks_sensing:
            eligible |= cause == MARKER
        u = rng.random((n, N))
        at_abn = (j_star == i)[:, None]
        direct = eligible & at_abn & (u < a)
        noise = eligible & ~direct & np.where(at_abn, (u >= a) & (u < a + d), u < d)
        cause[direct] = DIRECT
        cause[noise] = NOISE
        fired = direct | noise
        slot[fired] = i
        sources[:, i - 1] = fired.sum(axis=1)

        # every sensor draws so the stream layout does not depend on state
        mean = config.lam + config.M * (sources[:, :i] @ mu[:i, i - 1])
        y = rng.poisson(np.broadcast_to(mean[:, None], (n, N)))
        if not scenario.cooperative:
            continue
        waiting = cause == NONE
        if memoryless:
            hit = waiting & (y >= thr)
        else:
            running += y
            hit = waiting & (running >= thr)
        cause[hit] = MARKER
        slot[hit] = i

    released = (cause == DIRECT) | (cause == NOISE)
    levels = np.full((n, N), float(config.M))
    if released.any():
        beta = config.production_rate
        levels[released] = np.minimum(config.M, beta * (K - slot[released]) * config.T)
    z_fc = rng.poisson(config.M * (sources @ mu_fc) + lam_fc)
    return TrialBatch(j_star=j_star, cause=cause, slot=slot, levels=levels,
                      sources=sources, z_fc=z_fc)


def chunk_rngs(seed: int, n_trials: int):
    n_chunks = max(1, math.ceil(n_trials / CHUNK))
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    sizes = [min(CHUNK, n_trials - c * CHUNK) for c in range(n_chunks)]
    return list(zip(children, sizes))


def _run_chunk(args):
    scenario, config, child, size = args
    return simulate_batch(scenario, config, size, np.random.default_rng(child))


def simulate(scenario: Scenario, config: SystemConfig, n_trials: int, workers: int = 1):
    """Yield :class:`TrialBatch` chunks in trial order."""
    config.validate()
    jobs = [(scenario, config, child, size) for child, size in chunk_rngs(scenario.seed, n_trials)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            yield from pool.map(_run_chunk, jobs)
    else:
        for job in jobs:
            yield _run_chunk(job)


def recovered_sources(batch: TrialBatch, config: SystemConfig) -> np.ndarray:
    """Per-slot source counts as a storage-reading FC reconstructs them."""
    n, K = len(batch), config.K
    out = np.zeros((n, K), dtype=np.int64)
    mask = batch.levels < config.M
    if mask.any():
        rows = np.nonzero(mask)[0]
        slots = storage_to_slot(batch.levels[mask], config)
        np.add.at(out, (rows, slots - 1), 1)
    return out


def decide_type_a(batch: TrialBatch, config: SystemConfig) -> np.ndarray:
    """Type-A decision per trial (0 where nothing was released)."""
    table = _threshold_table(config)
    out = np.zeros(len(batch), dtype=np.int64)
    for n_rel in np.unique(batch.n_released):
        if n_rel == 0:
            continue
        sel = batch.n_released == n_rel
        out[sel] = np.searchsorted(table[n_rel], batch.z_fc[sel].astype(float), side="right")
    return out


def decide_type_b(batch: TrialBatch, config: SystemConfig, rule: str = "ml") -> np.ndarray:
    R = recovered_sources(batch, config)
    out = np.zeros(len(batch), dtype=np.int64)
    ok = R.sum(axis=1) > 0
    if not ok.any():
        return out
    if rule == "ml" and config.delta > 0:
        out[ok] = ml_decide_type_b_batch(R[ok], config)
    else:
        Rk = R[ok]
        # latest slot with the most sources
        out[ok] = Rk.shape[1] - np.argmax(Rk[:, ::-1] == Rk.max(axis=1, keepdims=True), axis=1)
    return out


def run_trial(scenario: Scenario, config: SystemConfig, rng: np.random.Generator) -> TrialOutcome:
    """Simulate one trial and unpack it into per-sensor records."""
    b = simulate_batch(scenario, config, 1, rng)
    sensors = []
    for k in range(config.N_s):
        c = int(b.cause[0, k])
        sensors.append(SensorRecord(flag=int(c != NONE), cause=CAUSES[c],
                                    activation_slot=int(b.slot[0, k]) or None,
                                    storage_level=float(b.levels[0, k])))
    released = int(b.n_released[0])
    loc_a = int(decide_type_a(b, config)[0]) if released else None
    loc_b = int(decide_type_b(b, config)[0]) if released else None
    return TrialOutcome(j_star=int(b.j_star[0]) or None, sensors=sensors,
                        source_vector=b.sources[0].copy(), n_total_active=int(b.n_active[0]),
                        n_released=released, z_fc=int(b.z_fc[0]),
                        detected=bool(b.n_active[0] >= config.tau1),
                        loc_type_a=loc_a, loc_type_b=loc_b)


def _mc_estimate(errors: int, n: int) -> ErrorEstimate:
    if n == 0:
        return ErrorEstimate(value=float("nan"), stderr=float("nan"), n_trials=0, provenance="mc")
    p = errors / n
    return ErrorEstimate(value=p, stderr=math.sqrt(p * (1 - p) / n), n_trials=n, provenance="mc")


METRICS = ("FA", "MD", "PE_D", "PE_L")


def estimate_error(metric: str, scenario: Scenario, n_trials: int, config: SystemConfig,
                   workers: int = 1) -> ErrorEstimate:
    """Empirical error frequency with binomial standard error.

    ``FA`` and ``MD`` force the hypothesis; ``PE_D`` runs both with the same
    trial count and mixes them with the prior; ``PE_L`` uses the scenario's
    FC type and drops trials without a source in the abnormality slot.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    metric = metric.upper()
    if metric == "PE_D":
        fa = estimate_error("FA", scenario, n_trials, config, workers)
        md = estimate_error("MD", _with(scenario, seed=scenario.seed + 1), n_trials, config, workers)
        return combine_estimates([config.prior_h0, 1 - config.prior_h0], [fa, md])
    if metric == "FA":
        sc = _with(scenario, hypothesis="H0")
        errors = sum(int((b.n_active >= config.tau1).sum()) for b in simulate(sc, config, n_trials, workers))
        return _mc_estimate(errors, n_trials)
    if metric == "MD":
        sc = _with(scenario, hypothesis="H1")
        errors = sum(int((b.n_active < config.tau1).sum()) for b in simulate(sc, config, n_trials, workers))
        return _mc_estimate(errors, n_trials)
    if metric == "PE_L":
        stats = ground_truth_decision_check(_with(scenario, cooperative=False), ["typeA" if scenario.fc_type == "A" else "typeB_ml"],
                                            n_trials, config, workers)
        rule = next(iter(stats.errors))
        return _mc_estimate(stats.errors[rule], stats.n_retained)
    raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")


def _with(scenario: Scenario, **changes) -> Scenario:
    fields = dict(hypothesis=scenario.hypothesis, j_star=scenario.j_star,
                  sensor_type=scenario.sensor_type, fc_type=scenario.fc_type,
                  seed=scenario.seed, cooperative=scenario.cooperative,
                  marker_blocks_sensing=scenario.marker_blocks_sensing)
    fields.update(changes)
    return Scenario(**fields)


@dataclass
class DecisionCheck:
    n_trials: int
    n_retained: int
    n_discarded: int
    errors: dict

    @property
    def discard_rate(self) -> float:
        return self.n_discarded / self.n_trials

    def error_rate(self, rule: str) -> float:
        return self.errors[rule] / self.n_retained if self.n_retained else float("nan")


RULES = ("typeA", "typeB_ml", "typeB_argmax")


def ground_truth_decision_check(scenario: Scenario, rules, n_trials: int, config: SystemConfig,
                                workers: int = 1) -> DecisionCheck:
    """Score localization rules against the simulated abnormality slot.

    Trials with no source in the abnormality slot (nothing to localize) are
    discarded and counted.
    """
    rules = list(rules)
    for r in rules:
        if r not in RULES:
            raise ValueError(f"unknown rule {r!r}; choose from {RULES}")
    config.check_storage()
    sc = _with(scenario, hypothesis="H1")
    errors = {r: 0 for r in rules}
    kept = 0
    for b in simulate(sc, config, n_trials, workers):
        keep = b.sources[np.arange(len(b)), b.j_star - 1] >= 1
        kept += int(keep.sum())
        for r in rules:
            if r == "typeA":
                dec = decide_type_a(b, config)
            elif r == "typeB_ml":
                dec = decide_type_b(b, config, "ml")
            else:
                dec = decide_type_b(b, config, "argmax")
            errors[r] += int((dec[keep] != b.j_star[keep]).sum())
    return DecisionCheck(n_trials=n_trials, n_retained=kept, n_discarded=n_trials - kept, errors=errors)
