"""``branchbench`` command line: datagen, macro-run, micro-run, report, list-presets.

Exit codes: 0 success, 1 workload failure (timeout, or failed steps above
``--fail-threshold``), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .backend import BACKEND_NAMES
from .datagen import ConfigError, DataGenConfig, LoadError, export_csv, generate_dataset
from .macrodriver import PRESET_NAMES, StartupError, load_config, preset, render_preset_table, run_workflow
from .macrodriver.presets import preset_row
from .metrics import export, load_report, nearest_rank, summary_lines
from .microdriver import BUILTIN_NAMES, ScenarioError, get_scenario, run_scenario

EXIT_OK, EXIT_WORKLOAD, EXIT_USAGE = 0, 1, 2
OUT_DIR_ENV = "BRANCHBENCH_OUT_DIR"


class UsageError(Exception):
    pass


def _out_root() -> Path:
    return Path(os.environ.get(OUT_DIR_ENV, "branchbench-out"))


def _default_out(stem: str, fmt: str) -> Path:
    return _out_root() / (f"{stem}.json" if fmt == "json" else stem)


def _multiplier(text: str) -> tuple[str, int]:
    name, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected NAME=COUNT, got {text!r}")
    try:
        return name.strip(), int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"count must be an integer in {text!r}") from None


def _fraction(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError("fail threshold must lie in [0, 1]")
    return v


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="branchbench", description="Workloads and measurements for branchable databases.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("datagen", help="generate the TPC-C/TPC-H-derived dataset as CSV")
    d.add_argument("--warehouses", "-W", type=_positive, default=1)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--multiplier", type=_multiplier, action="append", default=[], metavar="TABLE=COUNT")
    d.add_argument("--out", type=Path)
    d.add_argument("--backend", choices=BACKEND_NAMES, help="accepted for uniformity; unused")

    m = sub.add_parser("macro-run", help="run one macrobenchmark workflow")
    m.add_argument("--preset", help=f"one of: {', '.join(PRESET_NAMES)}")
    m.add_argument("--config", type=Path, help="JSON or key=value run config")
    m.add_argument("--backend", choices=BACKEND_NAMES)
    m.add_argument("--seed", type=int)
    m.add_argument("--timeout", type=float, help="wall-clock limit in seconds")
    m.add_argument("--workers", type=_positive, help="override T")
    m.add_argument("--out", type=Path)
    m.add_argument("--emit", choices=("json", "csv"), default="json")
    m.add_argument("--fail-threshold", type=_fraction, default=0.0,
                   help="largest tolerated fraction of failed steps (default 0)")

    u = sub.add_parser("micro-run", help="run one microbenchmark scenario")
    u.add_argument("--scenario", required=True, help=f"builtin ({', '.join(BUILTIN_NAMES)}) or a JSON file")
    u.add_argument("--backend", choices=BACKEND_NAMES)
    u.add_argument("--branches", type=_positive)
    u.add_argument("--workers", type=_positive)
    u.add_argument("--seed", type=int)
    u.add_argument("--repetitions", type=_positive)
    u.add_argument("--out", type=Path)
    u.add_argument("--emit", choices=("json", "csv"), default="json")
    u.add_argument("--fail-threshold", type=_fraction, default=0.0,
                   help="largest tolerated fraction of failed samples (default 0)")

    r = sub.add_parser("report", help="summarize or convert a saved report")
    r.add_argument("--in", dest="input", type=Path, required=True)
    r.add_argument("--emit", choices=("json", "csv"))
    r.add_argument("--out", type=Path)

    lp = sub.add_parser("list-presets", help="print every preset's parameter vector")
    lp.add_argument("--json", action="store_true", help="raw values as JSON (null for absent cells)")
    return p


# ----------------------------------------------------------------- commands


def cmd_datagen(args) -> int:
    cfg = DataGenConfig(args.warehouses, args.seed, dict(args.multiplier))
    out = args.out or _out_root() / f"dataset-W{args.warehouses}-seed{args.seed}"
    ds = generate_dataset(cfg)
    export_csv(ds, out)
    print(f"wrote {ds.total_rows()} rows in {len(ds.tables)} tables to {out}")
    return EXIT_OK


def _macro_config(args):
    if args.config is not None:
        base = preset(args.preset) if args.preset else None
        cfg = load_config(args.config, base=base)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        raise UsageError("macro-run needs --preset or --config")
    overrides = {}
    for flag, key in (("backend", "backend"), ("seed", "seed"), ("timeout", "timeout_s"), ("workers", "workers")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    return cfg.with_overrides(**overrides) if overrides else cfg


def _write(report, fmt: str, out: Path | None, stem: str) -> list[Path]:
    path = out or _default_out(stem, fmt)
    return export(report, fmt, path)


def cmd_macro_run(args) -> int:
    cfg = _macro_config(args)
    report = run_workflow(cfg)
    stem = f"macro-{(cfg.preset or cfg.workflow).replace(':', '-')}-{cfg.backend}-seed{cfg.seed}"
    paths = _write(report, args.emit, args.out, stem)
    for line in summary_lines(report):
        print(line)
    for path in paths:
        print(f"report: {path}")
    acc = report.accounting
    failed_fraction = acc.get("failed", 0) / max(1, acc.get("total", 0))
    if report.status == "timed_out":
        print("workload failure: wall-clock timeout", file=sys.stderr)
        return EXIT_WORKLOAD
    if failed_fraction > args.fail_threshold:
        print(f"workload failure: {failed_fraction:.1%} of steps failed "
              f"(threshold {args.fail_threshold:.1%})", file=sys.stderr)
        return EXIT_WORKLOAD
    return EXIT_OK


def micro_summary(result) -> list[str]:
    lines = [f"scenario: {result.config.name} on {result.backend}",
             f"timed wall-clock: {result.timed_wall_ns / 1e9:.3f} s (setup {result.setup_wall_ns / 1e9:.3f} s untimed)",
             f"samples: {len(result.samples)} (+{len(result.derived)} derived create_connect)"]
    thr = result.throughput()
    if thr:
        lines.append(f"read throughput: {thr:.1f} ops/s")
    ops = sorted({s.op for s in result.samples} | {s.op for s in result.derived})
    for op in ops:
        vals = sorted(result.durations(op))
        if vals:
            lines.append(f"  {op:<15} n={len(vals):<6} p50={nearest_rank(vals, 50) / 1e6:.3f} "
                         f"p95={nearest_rank(vals, 95) / 1e6:.3f} p99={nearest_rank(vals, 99) / 1e6:.3f} ms")
    return lines


def cmd_micro_run(args) -> int:
    cfg = get_scenario(args.scenario)
    cfg = cfg.with_params(branches=args.branches, workers=args.workers)
    if args.backend:
        cfg.backend = args.backend
    if args.seed is not None:
        cfg.seed = args.seed
    if args.repetitions:
        cfg.repetitions = args.repetitions
    result = run_scenario(cfg)
    report = result.to_report()
    stem = f"micro-{cfg.name}-{cfg.backend}-seed{cfg.seed}"
    out = args.out or _default_out(stem, args.emit)
    paths = export(report, args.emit, out)
    base = out.with_suffix("") if out.suffix else out
    plot = result.write_plot_csv(base.parent / f"{base.name}_plot.csv")
    for line in micro_summary(result):
        print(line)
    for path in [*paths, plot]:
        print(f"report: {path}")
    failed = report.accounting["failed"] / max(1, report.accounting["samples"])
    if failed > args.fail_threshold:
        print(f"workload failure: {failed:.1%} of samples failed", file=sys.stderr)
        return EXIT_WORKLOAD
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        report = load_report(args.input)
    except (OSError, json.JSONDecodeError, ValueError, TypeError) as exc:
        raise UsageError(f"cannot read report {args.input}: {exc}") from None
    for line in summary_lines(report):
        print(line)
    if args.emit:
        out = args.out or args.input.with_suffix("")
        if args.emit == "json" and args.out is None:
            out = args.input.with_name(args.input.stem + "_copy.json")
        for path in export(report, args.emit, out):
            print(f"wrote {path}")
    return EXIT_OK


def cmd_list_presets(args) -> int:
    if args.json:
        print(json.dumps({name: preset_row(name) for name in PRESET_NAMES}, indent=1))
    else:
        sys.stdout.write(render_preset_table())
    return EXIT_OK


COMMANDS = {
    "datagen": cmd_datagen,
    "macro-run": cmd_macro_run,
    "micro-run": cmd_micro_run,
    "report": cmd_report,
    "list-presets": cmd_list_presets,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StartupError, LoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_WORKLOAD


if __name__ == "__main__":
    sys.exit(main())
