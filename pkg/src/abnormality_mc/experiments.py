"""Config files, parameter sweeps, presets and CSV output.

A run is described by an :class:`ExperimentSpec`: a base configuration plus
one or more :class:`Study` blocks. Each study applies its own overrides,
walks the cartesian product of its sweep axes (first axis outermost) and
evaluates a list of metrics with the analytic engine, the Monte-Carlo engine
or both. Every (point, metric, engine) becomes one CSV row; failures land in
the ``error`` column and never abort the run.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import detection, localization, simulator
from .core import ConfigError, ErrorEstimate, FlowCheck, SystemConfig, TailMode
from .detection import BudgetExceeded, EnumerationPolicy, SensorType, count_source_vectors

BUNDLED_CONFIG = "paper-sec5.cfg"

# keys as written in config files and CSV headers -> SystemConfig field
ALIASES = {"lambda": "lam"}
DISPLAY = {v: k for k, v in ALIASES.items()}
FLOW_KEYS = ("rho", "eta", "d_e", "delta_x")
INT_FIELDS = {"N_s", "K_s", "tau1"}
CONFIG_FIELDS = tuple(f.name for f in dataclasses.fields(SystemConfig) if f.name != "flow_check")
REQUIRED_FIELDS = tuple(f.name for f in dataclasses.fields(SystemConfig)
                        if f.default is dataclasses.MISSING)

# exact enumeration above this many source vectors switches to sampling
AUTO_SAMPLES = 20000

COLUMNS_HEAD = ("preset", "engine", "tail_mode", "policy")
COLUMNS_TAIL = ("metric_name", "value", "stderr", "n_trials", "residual_bound", "error")


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def canonical_key(key: str) -> str:
    key = key.strip()
    return ALIASES.get(key, key)


def parse_value(name: str, text) -> float | int:
    """Convert a config or sweep token to the type its field expects."""
    if not isinstance(text, str):
        value = text
    else:
        try:
            value = float(text.strip())
        except ValueError:
            raise ConfigError(DISPLAY.get(name, name), f"not a number: {text!r}") from None
    if name in INT_FIELDS:
        if float(value) != int(value):
            raise ConfigError(DISPLAY.get(name, name), f"must be an integer (got {text!r})")
        return int(value)
    return float(value)


def parse_config_text(text: str, source: str = "<string>") -> SystemConfig:
    values, flow = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep or not key.strip() or not val.strip():
            raise ConfigError("<syntax>", f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        name = canonical_key(key)
        if name in FLOW_KEYS:
            flow[name] = parse_value(name, val)
            continue
        if name not in CONFIG_FIELDS:
            raise ConfigError(key.strip(), f"{source}:{lineno}: unknown key")
        if name in values:
            raise ConfigError(key.strip(), f"{source}:{lineno}: duplicate key")
        values[name] = parse_value(name, val)
    for name in REQUIRED_FIELDS:
        if name not in values:
            raise ConfigError(DISPLAY.get(name, name), f"missing required key in {source}")
    if flow:
        missing = [k for k in FLOW_KEYS if k not in flow]
        if missing:
            raise ConfigError(missing[0], "flow check needs all of " + ", ".join(FLOW_KEYS))
        values["flow_check"] = FlowCheck(**flow)
    return SystemConfig(**values).validate()


def load_config(path) -> SystemConfig:
    """Read a flat ``key = value`` file into a validated :class:`SystemConfig`."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror or exc}") from None
    return parse_config_text(text, str(path))


def bundled_config_text() -> str:
    return resources.files("abnormality_mc").joinpath("data", BUNDLED_CONFIG).read_text(encoding="utf-8")


def load_bundled_config() -> SystemConfig:
    return parse_config_text(bundled_config_text(), BUNDLED_CONFIG)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

DETECTION_METRICS = {
    f"{kind}_{st.value}": (kind, st)
    for st in SensorType for kind in ("FA", "MD", "PE_D", "PE_D_min")
}
LOCALIZATION_METRICS = ("PE_L_typeA", "PE_L_typeA_bound", "PE_L_typeB")
METRICS = tuple(DETECTION_METRICS) + LOCALIZATION_METRICS


def _no_mc(metric):
    raise NotImplementedError(f"{metric} has no Monte-Carlo estimator")


@dataclass(frozen=True)
class Study:
    """One block of a run: overrides, sweep axes and metrics."""

    metrics: tuple
    sweep: tuple = ()                    # ((field, (v1, v2, ...)), ...)
    overrides: dict = field(default_factory=dict)
    label: str = ""

    def points(self):
        names = [name for name, _ in self.sweep]
        for combo in itertools.product(*(vals for _, vals in self.sweep)):
            yield dict(zip(names, combo))


@dataclass(frozen=True)
class ExperimentSpec:
    base: SystemConfig
    studies: tuple
    engine: str = "analytic"             # analytic | mc | both
    policy: EnumerationPolicy = EnumerationPolicy()
    tail_mode: TailMode = TailMode.EXACT
    n_trials: int = 100000
    seed: int = 0
    out: Optional[str] = None
    preset: str = ""
    workers: int = 1
    tau2_grid: tuple = ()                # memoryless grid for PE_D_min_*
    tau2_agg_grid: tuple = ()            # aggregate grid for PE_D_min_*

    def __post_init__(self):
        if self.engine not in ("analytic", "mc", "both"):
            raise ValueError(f"engine must be analytic, mc or both (got {self.engine!r})")
        for study in self.studies:
            for m in study.metrics:
                if m not in METRICS:
                    raise ValueError(f"unknown metric {m!r}")
            for name, values in study.sweep:
                if name not in CONFIG_FIELDS:
                    raise ConfigError(DISPLAY.get(name, name), "not a sweepable config field")
                if len(values) == 0:
                    raise ConfigError(DISPLAY.get(name, name), "empty sweep axis")
            for name in study.overrides:
                if name not in CONFIG_FIELDS:
                    raise ConfigError(DISPLAY.get(name, name), "not a config field")

    @property
    def engines(self) -> tuple:
        return ("analytic", "mc") if self.engine == "both" else (self.engine,)

    def sweep_columns(self) -> list:
        cols = []
        for study in self.studies:
            for name, _ in study.sweep:
                if name not in cols:
                    cols.append(name)
        return cols


def resolve_policy(policy: EnumerationPolicy, config: SystemConfig, seed: int) -> EnumerationPolicy:
    """Swap exact enumeration for sampling when the vector count is out of budget."""
    if policy.mode != "exact":
        return policy
    if count_source_vectors(config.N_s, config.K) > policy.budget:
        return EnumerationPolicy.sampled(AUTO_SAMPLES, seed)
    return policy


def _grid(values, fallback):
    return tuple(values) if values else tuple(fallback)


def default_tau2_grid(config: SystemConfig, aggregate: bool = False) -> tuple:
    """Geometric grid around the noise mean of one sample (or of all K samples)."""
    centre = max(config.lam * (config.K if aggregate else 1), 1.0)
    grid = {int(math.ceil(centre * 2 ** (k / 2))) for k in range(-4, 9)}
    return tuple(sorted(g for g in grid if g >= 1))


def analytic_metric(metric: str, config: SystemConfig, spec: ExperimentSpec,
                    policy: EnumerationPolicy) -> ErrorEstimate:
    tail = spec.tail_mode
    if metric in DETECTION_METRICS:
        kind, st = DETECTION_METRICS[metric]
        if kind == "FA":
            return detection.false_alarm_prob(st, tail, policy, config)
        if kind == "MD":
            return detection.miss_detection_prob(st, tail, policy, config)
        if kind == "PE_D":
            return detection.detection_error_prob(st, tail, policy, config)
        aggregate = st is SensorType.AGGREGATE
        grid = spec.tau2_agg_grid if aggregate else spec.tau2_grid
        grid = _grid(grid, default_tau2_grid(config, aggregate))
        search = detection.optimize_thresholds(st, range(config.N_s + 2), grid, config, tail, policy)
        a = list(search.tau1_grid).index(search.tau1)
        b = list(search.tau2_grid).index(search.tau2)
        return ErrorEstimate(value=search.pe, stderr=float(search.stderr_surface[a, b]),
                             provenance=f"analytic-{policy.mode}", tail_mode=tail.value)
    if metric == "PE_L_typeB":
        return localization.localization_error_type_b(policy, config)
    if config.delta == 0:
        return localization.localization_error_perfect(tail, config)
    result = localization.localization_error_imperfect_type_a(tail, policy, config)
    if metric == "PE_L_typeA":
        return result.estimate
    return ErrorEstimate(value=result.upper_bound, provenance="analytic-bound", tail_mode=tail.value)


def mc_metric(metric: str, config: SystemConfig, spec: ExperimentSpec) -> ErrorEstimate:
    config.validate()
    if metric in DETECTION_METRICS:
        kind, st = DETECTION_METRICS[metric]
        if kind == "PE_D_min":
            _no_mc(metric)
        scenario = simulator.Scenario(sensor_type=st, seed=spec.seed)
        return simulator.estimate_error(kind, scenario, spec.n_trials, config)
    if metric == "PE_L_typeA_bound":
        _no_mc(metric)
    fc = "A" if metric == "PE_L_typeA" else "B"
    scenario = simulator.Scenario(fc_type=fc, seed=spec.seed)
    return simulator.estimate_error("PE_L", scenario, spec.n_trials, config)


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if value.is_integer() and abs(value) < 1e15:
            return str(int(value)) if abs(value) < 1e6 else repr(value)
        return repr(value)
    return str(value)


def _describe(exc: BaseException) -> str:
    return f"{type(exc).__name__}: {exc}".replace("\n", " ")


def _evaluate_point(args):
    """Rows (as dicts) for one sweep point. Never raises."""
    spec, study, point = args
    rows = []
    try:
        config = spec.base.replace(**study.overrides).replace(**point).validate()
        policy = resolve_policy(spec.policy, config, spec.seed)
    except (ConfigError, ValueError, TypeError) as exc:
        for metric in study.metrics:
            for engine in spec.engines:
                rows.append(dict(engine=engine, policy=spec.policy.label(), metric_name=metric,
                                 error=_describe(exc)))
        return rows, True
    failed = True
    for metric in study.metrics:
        estimates = {}
        for engine in spec.engines:
            row = dict(engine=engine, metric_name=metric,
                       policy=policy.label() if engine == "analytic" else "")
            try:
                if engine == "analytic":
                    est = analytic_metric(metric, config, spec, policy)
                else:
                    est = mc_metric(metric, config, spec)
                estimates[engine] = est
                row.update(value=est.value, stderr=est.stderr, n_trials=est.n_trials,
                           residual_bound=est.residual_bound)
                failed = False
            except (ConfigError, ValueError, NotImplementedError, BudgetExceeded,
                    ArithmeticError, MemoryError) as exc:
                row["error"] = _describe(exc)
            rows.append(row)
        if len(estimates) == 2:
            flag = mismatch(estimates["analytic"], estimates["mc"])
            if flag:
                rows[-1]["error"] = flag
    return rows, failed


def mismatch(analytic: ErrorEstimate, mc: ErrorEstimate) -> str:
    """Non-empty message when the two engines disagree beyond tolerance."""
    if not (math.isfinite(analytic.value) and math.isfinite(mc.value)):
        return ""
    diff = abs(analytic.value - mc.value)
    se = math.hypot(analytic.stderr, mc.stderr)
    tol = max(0.01, 4 * se)
    if diff > tol:
        return f"engine mismatch: |analytic - mc| = {diff:.6g} > {tol:.6g}"
    return ""


@dataclass
class RunResult:
    columns: list
    rows: list
    metadata: list
    n_points: int
    n_failed: int

    @property
    def all_failed(self) -> bool:
        return self.n_points > 0 and self.n_failed == self.n_points

    def to_csv(self) -> str:
        buf = io.StringIO()
        for line in self.metadata:
            buf.write(f"# {line}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([fmt(row.get(c)) for c in self.columns])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="")


def _metadata(spec: ExperimentSpec) -> list:
    lines = [f"preset: {spec.preset or '-'}", f"engine: {spec.engine}",
             f"seed: {spec.seed}", f"n_trials: {spec.n_trials}"]
    metrics = {m for s in spec.studies for m in s.metrics}
    for st, grid, aggregate in ((SensorType.MEMORYLESS, spec.tau2_grid, False),
                                (SensorType.AGGREGATE, spec.tau2_agg_grid, True)):
        if f"PE_D_min_{st.value}" in metrics:
            text = " ".join(fmt(g) for g in grid) if grid else "geometric around noise mean (per point)"
            lines.append(f"{'tau2_agg' if aggregate else 'tau2'}_grid: {text}")
            lines.append("tau1_grid: 0..N_s+1")
    for i, study in enumerate(spec.studies):
        if study.overrides or study.label:
            ov = " ".join(f"{DISPLAY.get(k, k)}={fmt(v)}" for k, v in study.overrides.items())
            lines.append(" ".join(t for t in (f"study {i + 1}:", study.label, ov) if t))
    return lines


def run_experiment(spec: ExperimentSpec) -> RunResult:
    """Evaluate every study point and return rows in sweep order."""
    columns = list(COLUMNS_HEAD) + [DISPLAY.get(c, c) for c in spec.sweep_columns()] + list(COLUMNS_TAIL)
    jobs = [(spec, study, point) for study in spec.studies for point in study.points()]
    if spec.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            results = list(pool.map(_evaluate_point, jobs))
    else:
        results = [_evaluate_point(job) for job in jobs]
    rows, n_failed = [], 0
    for (_, _, point), (point_rows, failed) in zip(jobs, results):
        n_failed += failed
        for row in point_rows:
            full = dict(preset=spec.preset, tail_mode=spec.tail_mode.value)
            full.update({DISPLAY.get(k, k): v for k, v in point.items()})
            full.update(row)
            rows.append(full)
    result = RunResult(columns=columns, rows=rows, metadata=_metadata(spec),
                       n_points=len(jobs), n_failed=n_failed)
    if spec.out:
        result.write(spec.out)
    return result


def parse_sweep(text: str) -> tuple:
    """``"lambda=10,30,50"`` -> ``("lam", (10.0, 30.0, 50.0))``."""
    key, sep, vals = text.partition("=")
    if not sep:
        raise ConfigError(text, "sweep must look like name=v1,v2,...")
    name = canonical_key(key)
    if name not in CONFIG_FIELDS:
        raise ConfigError(key.strip(), "not a sweepable config field")
    values = tuple(parse_value(name, v) for v in vals.split(",") if v.strip())
    if not values:
        raise ConfigError(key.strip(), "empty sweep axis")
    return name, values


def with_sweeps(studies: Sequence[Study], sweeps: Sequence[tuple]) -> tuple:
    """Replace same-named axes in every study, or add new ones innermost."""
    out = []
    for study in studies:
        axes = dict(study.sweep)
        for name, values in sweeps:
            axes[name] = values
        out.append(dataclasses.replace(study, sweep=tuple(axes.items()),
                                       overrides={k: v for k, v in study.overrides.items()
                                                  if k not in axes}))
    return tuple(out)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

# desk-scale detection setup: reference physics, FC at 300 m (K = 5)
DESK_DETECTION = dict(x_FC=300.0, N_s=6, alpha=0.3, delta=0.002, lam=2.0, M=1e7,
                      tau1=2, tau2=8.0, tau2_agg=40.0)
# desk-scale localization setup
DESK_LOCALIZATION = dict(x_FC=300.0, N_s=10, alpha=0.8, M=1e10)

DELTA_GRID = (1e-4, 1e-3, 5e-3, 1e-2, 5e-2)
M_GRID = (1e8, 1e9, 1e10, 1e11, 1e12)
FIG4_TAU2_GRID = (3.0, 4.0, 5.0, 8.0, 10.0, 15.0, 20.0, 29.0, 40.0)


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    studies: tuple
    engine: str = "analytic"
    policy: str = "exact"
    n_trials: int = 100000
    tau2_grid: tuple = ()
    tau2_agg_grid: tuple = ()


PRESETS = {p.name: p for p in (
    Preset("fig3",
           "P_e^D vs tau1 for memoryless sensors, lambda in {10, 30, 50}. "
           "Reference parameters (N_s=20, K=10) with 20000 sampled source vectors.",
           (Study(("PE_D_memoryless",),
                  sweep=(("lam", (10.0, 30.0, 50.0)), ("tau1", tuple(range(0, 22))))),),
           policy=f"sampled:{AUTO_SAMPLES}"),
    Preset("fig4",
           "Minimum P_e^D over (tau1, tau2) vs N_s in {4, 6, 8, 10} for M in {0, 1e7, 2e7} "
           "and alpha in {0.2, 0.3}. Scaled to K=5 (FC at 300 m), exact enumeration.",
           (Study(("PE_D_min_memoryless",),
                  sweep=(("alpha", (0.2, 0.3)), ("M", (0.0, 1e7, 2e7)), ("N_s", (4, 6, 8, 10))),
                  overrides=dict(x_FC=300.0)),),
           tau2_grid=FIG4_TAU2_GRID),
    Preset("fig5",
           "Memoryless vs aggregate P_e^D vs delta with M=1e8. Scaled to the desk "
           "detection setup (N_s=6, K=5, lambda=2, tau1=2, tau2=8, tau2_agg=40).",
           (Study(("PE_D_memoryless", "PE_D_aggregate"),
                  sweep=(("delta", DELTA_GRID),),
                  overrides={**DESK_DETECTION, "M": 1e8}),)),
    Preset("fig6",
           "Type-A localization error vs M in 1e8..1e12 for delta in {0, 0.005, 0.01}. "
           "Scaled to N_s=10, K=5, alpha=0.8.",
           (Study(("PE_L_typeA", "PE_L_typeA_bound"),
                  sweep=(("delta", (0.0, 0.005, 0.01)), ("M", M_GRID)),
                  overrides=dict(x_FC=300.0, N_s=10, alpha=0.8)),)),
    Preset("fig7",
           "Type-A and type-B localization error vs N_s for delta in {0, 0.01}, "
           "M=1e10, alpha=0.8, K=5.",
           (Study(("PE_L_typeA", "PE_L_typeB"),
                  sweep=(("delta", (0.0, 0.01)), ("N_s", (2, 4, 6, 8, 10))),
                  overrides=DESK_LOCALIZATION),)),
    Preset("fig8",
           "Type-A and type-B localization error vs FC distance x_FC in 120..600 m "
           "(K=2..10) for delta in {0, 0.01}, N_s=10, M=1e10, alpha=0.8.",
           (Study(("PE_L_typeA", "PE_L_typeB"),
                  sweep=(("delta", (0.0, 0.01)),
                         ("x_FC", (120.0, 180.0, 240.0, 300.0, 360.0, 420.0, 480.0, 540.0, 600.0))),
                  overrides=dict(N_s=10, alpha=0.8, M=1e10)),)),
    Preset("desk-validate",
           "Analytic vs Monte-Carlo cross-check at desk scale: detection FA/MD for both "
           "sensor types, localization type-A (with bound) and type-B for delta in "
           "{0, 0.005, 0.01}.",
           (Study(tuple(f"{k}_{st.value}" for st in SensorType for k in ("FA", "MD")),
                  overrides=DESK_DETECTION, label="detection"),
            Study(("PE_L_typeA", "PE_L_typeA_bound", "PE_L_typeB"),
                  sweep=(("delta", (0.0, 0.005, 0.01)),),
                  overrides=DESK_LOCALIZATION, label="localization")),
           engine="both"),
)}


def list_presets() -> list:
    return [(p.name, p.description) for p in PRESETS.values()]


def preset_spec(name: str, base: Optional[SystemConfig] = None, **changes) -> ExperimentSpec:
    """Build the spec for a named preset; ``changes`` override spec fields."""
    try:
        preset = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    seed = changes.get("seed", 0)
    fields = dict(base=base if base is not None else load_bundled_config(),
                  studies=preset.studies, engine=preset.engine,
                  policy=EnumerationPolicy.parse(preset.policy, seed),
                  n_trials=preset.n_trials, preset=name,
                  tau2_grid=preset.tau2_grid, tau2_agg_grid=preset.tau2_agg_grid)
    fields.update(changes)
    return ExperimentSpec(**fields)
