"""Command line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 numerical
divergence, 4 validation failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import detect
from .experiment import (
    ConfigError,
    ExperimentConfig,
    filter_file,
    read_filter_csv,
    run_ensemble,
    summarize,
    write_json,
)
from .faultproc import FaultPath, QMatrixError
from .filtering import FORMS, DivergenceError
from .linop import DimensionError, HermiticityError
from .truthsim import RecordFormatError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_VALIDATION = 4

_INPUT_ERRORS = (ConfigError, RecordFormatError, QMatrixError, DimensionError,
                 HermiticityError, FileNotFoundError)


def _load(args, **overrides):
    cfg = ExperimentConfig.load(args.config)
    return cfg.with_run(**overrides)


def cmd_simulate(args):
    cfg = _load(args, seed=args.seed, form=args.form, n_traj=args.traj)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = run_ensemble(cfg, out, workers=args.workers, chunk_size=args.chunk_size)
    cfg.dump(out / "config.json")
    summary = summarize(result)
    write_json(out / "summary.json", summary)
    write_json(out / "metrics.json", detect.metrics(result.reports))
    k = summary["kolmogorov"]
    print(f"{cfg.run.n_traj} trajectories written to {out}")
    if k["max_abs_z"] is not None:
        print(f"kolmogorov: max |mean - p|/se = {k['max_abs_z']:.2f}")
    return EXIT_OK


def cmd_filter(args):
    cfg = _load(args, form=args.form)
    report = filter_file(cfg, args.record, args.out_dir, sidecar=args.sidecar)
    final = ", ".join(f"{p:.4f}" for p in report.p_hat[-1])
    print(f"filtered {args.record}: final posterior [{final}]")
    return EXIT_OK


def _hidden_truth(filter_csv, times):
    """Hidden path for ``filter_#####.csv`` from the sibling record sidecar."""
    p = Path(filter_csv)
    if not p.stem.startswith("filter_"):
        return None
    side = p.with_name("record_" + p.stem[len("filter_"):] + ".json")
    if not side.exists():
        return None
    with open(side) as fh:
        meta = json.load(fh)
    if "hidden_path" not in meta:
        return None
    return FaultPath.from_sidecar(meta["hidden_path"], times)


def cmd_detect(args):
    threshold = args.threshold
    if threshold is None:
        threshold = ExperimentConfig.load(args.config).run.threshold if args.config else 0.8
    if not 0 < threshold <= 1:
        raise ConfigError("threshold must lie in (0, 1]")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for name in args.inputs:
        times, p_hat = read_filter_csv(name)
        path = _hidden_truth(name, times)
        report = detect.build_report(times, p_hat, threshold,
                                     None if path is None else path.modes,
                                     None if path is None else path.jumps)
        stem = Path(name).stem
        tag = stem[len("filter"):] if stem.startswith("filter") else "_" + stem
        report.write_flags(out / f"flags{tag}.csv")
        reports.append(report)
    if reports and all(r.true_modes is not None for r in reports):
        write_json(out / "metrics.json", detect.metrics(reports))
        print(f"wrote flags and metrics for {len(reports)} trajectories to {out}")
    else:
        print(f"wrote flags for {len(reports)} trajectories to {out} (no hidden truth)")
    return EXIT_OK


def cmd_validate(args):
    from .validation import format_table, run_validate

    results = run_validate(quick=not args.full)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VALIDATION


def build_parser():
    parser = argparse.ArgumentParser(
        prog="faultfilter",
        description="Fault-tolerant filtering of homodyne records from a single-photon-driven atom.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate records, filter them and score detection")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", default="out")
    p.add_argument("--form", choices=FORMS)
    p.add_argument("--traj", type=int, help="number of trajectories")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--chunk-size", type=int, default=100,
                   help="trajectories advanced together (does not change results)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("filter", help="filter a stored measurement record")
    p.add_argument("--config", required=True)
    p.add_argument("--record", required=True, help="record CSV (t, dY)")
    p.add_argument("--sidecar", help="record JSON sidecar (default: next to the CSV)")
    p.add_argument("--out-dir", default="out")
    p.add_argument("--form", choices=FORMS)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("detect", help="apply the threshold rule to filter outputs")
    p.add_argument("inputs", nargs="+", help="filter trajectory CSV files")
    p.add_argument("--config")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out-dir", default="out")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("validate", help="run the built-in invariant suites")
    p.add_argument("--full", action="store_true", help="use full-size trajectory counts")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
