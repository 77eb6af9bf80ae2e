"""Command line entry point: ``varbandit run|sweep|report``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .harness import (
    SweepSpec,
    load_json,
    run_experiment,
    run_sweep,
    seed_override,
    write_action_table,
    write_report,
    write_trace_csv,
)
from .types import ConfigError, ExperimentConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _cmd_run(args) -> int:
    raw = load_json(args.config)
    config = ExperimentConfig.from_dict(raw)
    seed = seed_override()
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    trace, diag, extras = run_experiment(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{config.algorithm.value}_{config.hash()}_s{config.seed}_r{config.run_index}"
    path = out / f"{stem}.csv"
    write_trace_csv(trace, path)
    summary = {
        "trace": str(path),
        "algorithm": config.algorithm.value,
        "steps": trace.length,
        "regret": trace.regret,
        "diagnostics": diag.to_dict(),
    }
    if trace.action_table:  # ball runs: ids index played vectors
        table = out / f"{stem}.actions.csv"
        write_action_table(trace, table)
        summary["actions"] = str(table)
    if "exploit_reached" in trace.info:
        summary["exploit_reached"] = trace.info["exploit_reached"]
    summary.update(extras)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    spec = SweepSpec.from_dict(load_json(args.spec))
    seed = seed_override()
    if seed is not None:
        spec = dataclasses.replace(spec, master_seed=seed)
    out = args.out or spec.out or "sweep_out"
    summary = run_sweep(spec, out, traces=args.traces, jobs=args.jobs)
    print(f"{summary['n_ok']} cells ok, {summary['n_failed']} failed; report in {Path(out) / 'report.csv'}")
    for check in summary["theorem_checks"]:
        print(f"  {check['algorithm']} {check['params']}: slope {check['slope']:.3f} "
              f"expected {check['expected']} -> {check['verdict']}")
    return EXIT_OK if summary["n_ok"] >= 1 else EXIT_RUNTIME


def _cmd_report(args) -> int:
    summary = write_report(args.in_dir)
    report = Path(args.in_dir) / "report.csv"
    sys.stdout.write(report.read_text())
    return EXIT_OK if summary["n_ok"] >= 1 else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varbandit", description="Parameter-noise linear bandit experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one configuration and write its trace CSV")
    p_run.add_argument("--config", required=True, help="JSON experiment config")
    p_run.add_argument("--out", default=".", help="output directory (default: current)")
    p_run.set_defaults(func=_cmd_run)
    p_sweep = sub.add_parser("sweep", help="run a grid of configurations")
    p_sweep.add_argument("--spec", required=True, help="JSON sweep spec")
    p_sweep.add_argument("--out", default=None, help="output directory")
    p_sweep.add_argument("--traces", action="store_true", help="also write per-run trace CSVs")
    p_sweep.add_argument("--jobs", type=int, default=None, help="parallel worker processes")
    p_sweep.set_defaults(func=_cmd_sweep)
    p_rep = sub.add_parser("report", help="rebuild report.csv and summary.json from a sweep directory")
    p_rep.add_argument("--in", dest="in_dir", required=True, help="sweep output directory")
    p_rep.set_defaults(func=_cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
