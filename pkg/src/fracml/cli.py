"""Command-line front end: ``fracml {condition,decomposition,properties,adapt}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiments import (ExperimentError, load_config, run_adaptive, run_condition_experiment,
                          run_decomposition_diagnostic, run_property_suite)

log = logging.getLogger("fracml")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--domain", choices=["l_shape", "unit_square"])
    p.add_argument("--s", type=float)
    p.add_argument("--family", choices=["p0", "p1"])
    p.add_argument("--hierarchy", choices=["adaptive", "fcc", "uniform"])
    p.add_argument("--theta", type=float)
    p.add_argument("--max-dofs", type=int, dest="max_dofs")
    p.add_argument("--gauss-order", type=int, dest="gauss_order")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fracml",
                                     description="Multilevel preconditioning experiments for the "
                                                 "integral fractional Laplacian")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [("condition", "condition numbers per level (CSV and gnuplot script)"),
                       ("decomposition", "multilevel norm and stable decomposition ratios"),
                       ("properties", "invariant checks with a JSON summary"),
                       ("adapt", "plain adaptive loop with per-iteration CSV")]:
        p = sub.add_parser(name, help=text)
        _common(p)
        if name == "properties":
            p.add_argument("--inject-fault", choices=["skip_closure"], dest="inject_fault")
            p.add_argument("--fast", action="store_true", help="skip the SPD and quadrature checks")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    keys = ("domain", "s", "family", "hierarchy", "theta", "max_dofs", "gauss_order", "seed", "out")
    try:
        config = load_config(args.config, **{k: getattr(args, k) for k in keys})
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    Path(config.out).mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "condition":
            res = run_condition_experiment(config)
            for r in res.rows:
                print(f"level {r.level:3d}  N {r.ndof:6d}  kappa(A) {r.kappa_A:10.4g}  "
                      f"kappa(P) {r.kappa_P:8.4g}")
            print(f"wrote {res.csv_path} and {res.plot_path}")
            return 0 if all(r.converged for r in res.rows) else 1
        if args.command == "decomposition":
            rows = run_decomposition_diagnostic(config)
            print(f"wrote {len(rows)} rows to {config.out}")
            return 0
        if args.command == "adapt":
            records, _, path = run_adaptive(config)
            last = records[-1]
            print(f"{len(records)} iterations, final N {last.ndof}, eta {last.eta:.4g}")
            print(f"wrote {path}")
            return 0
        report = run_property_suite(config, inject_fault=args.inject_fault,
                                    include_slow=not args.fast)
        summary = report.summary()
        (Path(config.out) / "properties.json").write_text(json.dumps(summary, indent=2))
        for r in report.results:
            print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:20s} seed={r.seed}  {r.detail}")
        return 0 if report.passed else 1
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
