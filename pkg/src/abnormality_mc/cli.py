"""Command-line front end.

    abnormality-mc run --preset fig5 --out fig5.csv
    abnormality-mc run --config my.cfg --sweep delta=0.001,0.01 --engine both
    abnormality-mc validate --config my.cfg
    abnormality-mc presets

Exit status: 0 on success, 1 on a configuration error, 2 when every sweep
point failed.
"""

from __future__ import annotations

import argparse
import sys

from .core import ConfigError, TailMode, validate_flow_regime
from .detection import EnumerationPolicy
from .experiments import (ExperimentSpec, Study, list_presets, load_config, parse_sweep,
                          preset_spec, run_experiment, with_sweeps)

EXIT_OK, EXIT_CONFIG, EXIT_ALL_FAILED = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abnormality-mc",
                                     description="Error probabilities for cooperative abnormality "
                                                 "detection and localization by mobile sensors.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="evaluate a preset or a sweep and write CSV")
    run.add_argument("--config", help="key = value config file (default: bundled reference values)")
    run.add_argument("--preset", help="named preset, see the presets command")
    run.add_argument("--sweep", action="append", default=[], metavar="NAME=V1,V2,...",
                     help="sweep axis; repeat for a grid (first axis outermost)")
    run.add_argument("--metric", action="append", default=[],
                     help="metric to evaluate when no preset is given (default PE_D_memoryless)")
    run.add_argument("--engine", choices=("analytic", "mc", "both"))
    run.add_argument("--policy", help="exact | truncated:<cap> | sampled:<n>")
    run.add_argument("--tail", choices=("exact", "gauss"), default="exact")
    run.add_argument("--trials", type=int, help="Monte-Carlo trials per point")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--workers", type=int, default=1, help="processes for sweep points")
    run.add_argument("--out", help="output CSV path (default: stdout)")

    val = sub.add_parser("validate", help="check a config file and report derived quantities")
    val.add_argument("--config", required=True)

    sub.add_parser("presets", help="list the bundled presets")
    return parser


def _spec_from_args(args) -> ExperimentSpec:
    base = load_config(args.config) if args.config else None
    sweeps = [parse_sweep(s) for s in args.sweep]
    changes = dict(seed=args.seed, tail_mode=TailMode.parse(args.tail), out=args.out,
                   workers=args.workers)
    if args.engine:
        changes["engine"] = args.engine
    if args.policy:
        changes["policy"] = EnumerationPolicy.parse(args.policy, args.seed)
    if args.trials is not None:
        if args.trials < 1:
            raise ConfigError("trials", "must be >= 1")
        changes["n_trials"] = args.trials
    if args.preset:
        spec = preset_spec(args.preset, base, **changes)
        if sweeps:
            spec = ExperimentSpec(**{**spec.__dict__, "studies": with_sweeps(spec.studies, sweeps)})
        if args.metric:
            spec = ExperimentSpec(**{**spec.__dict__, "studies": tuple(
                Study(tuple(args.metric), s.sweep, s.overrides, s.label) for s in spec.studies)})
        return spec
    if base is None:
        raise ConfigError("config", "run needs --config or --preset")
    metrics = tuple(args.metric) or ("PE_D_memoryless",)
    return ExperimentSpec(base=base, studies=(Study(metrics, tuple(sweeps)),), **changes)


def cmd_run(args) -> int:
    try:
        spec = _spec_from_args(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    result = run_experiment(spec)
    if not args.out:
        sys.stdout.write(result.to_csv())
    flagged = sum(1 for r in result.rows if r.get("error"))
    if flagged:
        print(f"{flagged} of {len(result.rows)} rows carry an error or mismatch flag", file=sys.stderr)
    return EXIT_ALL_FAILED if result.all_failed else EXIT_OK


def cmd_validate(args) -> int:
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"ok: K={config.K} N_s={config.N_s} beta={config.production_rate:.6g} "
          f"K_s={config.storage_slots} tau2_agg={config.agg_threshold:g}")
    report = validate_flow_regime(config)
    if report.status == "unchecked":
        print("flow regime: unchecked (no rho/eta/d_e/delta_x given)")
    else:
        print(f"flow regime: Re={report.reynolds:.4g} laminar={'yes' if report.laminar_ok else 'NO'} "
              f"dispersion ratio={report.dispersion_ratio:.4g} "
              f"uniform cross-section={'yes' if report.dispersion_ok else 'NO'}")
    try:
        config.check_storage()
    except ConfigError as exc:
        print(f"warning: {exc} (localization unavailable)")
    return EXIT_OK


def cmd_presets(args) -> int:
    for name, description in list_presets():
        print(f"{name:14s} {description}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"run": cmd_run, "validate": cmd_validate, "presets": cmd_presets}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
