"""Command line entry point: ``evoprobe <subcommand> ...``.

Exit codes: 0 when every cell completed and every invariant check passed,
1 otherwise, 2 for configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from ..theory import BoundReport, all_hold, verify_bound_grid
from .config import ConfigError, ExperimentConfig, apply_overrides
from .runner import TraceError, ablation_report, curve_export, run_cell, run_matrix

log = logging.getLogger("evoprobe")


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (dotted path, JSON value); repeatable")
    p.add_argument("--method", help="method name, or a comma-separated list")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--budgets", help="comma-separated checkpoint budgets")
    p.add_argument("--output-dir", help="run directory")
    p.add_argument("--workers", type=int, help="parallel cells")


def _csv_ints(s: str):
    return [int(v) for v in s.split(",") if v.strip()]


def load_config(args) -> ExperimentConfig:
    if args.config is not None:
        try:
            d = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([f"cannot read {args.config}: {exc}"]) from None
        base_dir = str(args.config.parent.resolve())
    else:
        d, base_dir = {}, str(Path.cwd())
    d = apply_overrides(d, args.overrides)
    if args.method:
        d.pop("method", None)
        d["methods"] = args.method.split(",")
    if args.seeds:
        d["seeds"] = _csv_ints(args.seeds)
    if args.budgets:
        d["budgets"] = _csv_ints(args.budgets)
    if args.output_dir:
        d["output_dir"] = args.output_dir
    if args.workers is not None:
        d["workers"] = args.workers
    return ExperimentConfig.from_dict(d, base_dir=base_dir)


def _report_cells(cells) -> int:
    bad = [c for c in cells if not c.ok]
    for c in bad:
        failed = [k for k, v in c.invariants.items() if v is False]
        log.error("%s seed %s: %s", c.method, c.seed, c.error or f"invariants failed: {failed}")
    return 0 if not bad else 1


def cmd_attack(args) -> int:
    cfg = load_config(args)
    method, seed = cfg.methods[0], cfg.seeds[0]
    res = run_cell(cfg, method, seed, cfg.output_dir)
    print(json.dumps({"method": method, "seed": seed, "status": res.status, "final_mse": res.final_mse,
                      "invariants": res.invariants, "error": res.error}))
    return _report_cells([res])


def cmd_matrix(args) -> int:
    cfg = load_config(args)
    result = run_matrix(cfg)
    for row in result.summary:
        print(",".join(str(v) for v in row.values()))
    return _report_cells(result.cells)


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    report = ablation_report(cfg)
    for row in report.rows:
        print(",".join(str(v) for v in row.values()))
    return 0 if all(r["runs"] == len(cfg.seeds) for r in report.rows) else 1


def cmd_verify_theorem1(args) -> int:
    reports = verify_bound_grid(args.n, args.sigma, args.samples, args.seed)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(BoundReport.columns())
        for r in reports:
            w.writerow(r.row())
    finally:
        if args.out:
            out.close()
    return 0 if all_hold(reports) else 1


def cmd_curves(args) -> int:
    for p in curve_export(args.run_dir):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="evoprobe", description="hard-label evolutionary attack experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attack", help="run a single (method, seed) cell")
    _add_config_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("matrix", help="run every method x seed cell and summarize")
    _add_config_flags(p)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("ablate", help="CMA/SCS settings and the m sweep")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify-theorem1", help="Monte Carlo check of the zero-mean success bound")
    p.add_argument("--n", type=int, nargs="+", default=[10, 100, 1000])
    p.add_argument("--sigma", type=float, nargs="+", default=[0.01, 0.1, 1.0])
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_verify_theorem1)

    p = sub.add_parser("curves", help="export distortion-vs-query curves of a run directory")
    p.add_argument("run_dir", type=Path)
    p.set_defaults(func=cmd_curves)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except TraceError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
