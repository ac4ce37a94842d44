"""Command-line entry point: ``ensemble-pde <subcommand> --config PATH``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .coverage import finite_difference_check
from .grid import read_field_csv
from .scenario import (BUNDLED, ConfigError, StageError, bundled_config_text, coverage_problem, load_config,
                       read_controls_csv, run_pipeline)

STAGES = {"map": ("mapping",), "coverage": ("coverage",), "simulate": ("micro",),
          "pipeline": ("mapping", "coverage", "micro")}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ensemble-pde", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="scenario file, or the name of a bundled one")
        sp.add_argument("--seed", type=int, help="overrides micro.seed")
        sp.add_argument("--out", help="base directory for run folders (overrides output.dir)")
        sp.add_argument("--threads", type=int, default=1)

    common(sub.add_parser("map", help="observations, inverse solve and thresholding"))
    sp = sub.add_parser("coverage", help="optimise controls for a map")
    common(sp)
    sp.add_argument("--map", help="indicator CSV to cover (default: the configured region)")
    sp = sub.add_parser("simulate", help="agent simulation under given controls")
    common(sp)
    sp.add_argument("--controls", required=True, help="controls.csv from a coverage run")
    sp.add_argument("--map", help="indicator CSV (default: the configured region)")
    common(sub.add_parser("pipeline", help="all enabled stages in sequence"))
    sp = sub.add_parser("check-gradient", help="adjoint gradient against central differences")
    common(sp)
    sp.add_argument("--directions", type=int, default=10)
    sp.add_argument("--eps", type=float, default=1e-4)
    sp.add_argument("--tol", type=float, default=1e-2)
    sp = sub.add_parser("make-config", help="print a bundled scenario")
    sp.add_argument("name", choices=BUNDLED)
    sp.add_argument("--out", help="write to this file instead of stdout")
    return p


def _config(arg):
    if arg in BUNDLED and not Path(arg).exists():
        from .scenario import parse_config
        return parse_config(bundled_config_text(arg))
    return load_config(arg)


def _check_gradient(cfg, args) -> int:
    prob, _ = coverage_problem(cfg, cfg.region_indicator())
    rng = np.random.default_rng(cfg["micro"]["seed"] if args.seed is None else args.seed)
    lo, hi = prob.lower, prob.upper
    u = prob.control(lo + (hi - lo) * (0.25 + 0.5 * rng.random((prob.M, 3))))
    dirs = [rng.standard_normal((prob.M, 3)) for _ in range(args.directions)]
    errs, rep = finite_difference_check(u, prob, dirs, eps=args.eps)
    for i, e in enumerate(errs):
        print(f"direction {i:2d}: relative error {e:.3e}")
    print(f"assembly-form discrepancy {rep.discrepancy:.3e}")
    ok = bool(errs.max() <= args.tol)
    print(f"max relative error {errs.max():.3e} ({'ok' if ok else 'above'} tolerance {args.tol:g})")
    return 0 if ok else 1


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "make-config":
            text = bundled_config_text(args.name)
            if args.out:
                Path(args.out).write_text(text)
            else:
                sys.stdout.write(text)
            return 0
        cfg = _config(args.config)
        if args.command == "check-gradient":
            return _check_gradient(cfg, args)
        H = read_field_csv(args.map)[1] if getattr(args, "map", None) else None
        controls = None
        if args.command == "simulate":
            cov = cfg["coverage"]
            controls = read_controls_csv(args.controls, cov["T"])
            cfg = cfg.replace("micro", enabled=True)
        elif args.command != "pipeline":
            section = {"map": "mapping", "coverage": "coverage"}[args.command]
            cfg = cfg.replace(section, enabled=True)
        run = run_pipeline(cfg, out=args.out, seed=args.seed, threads=args.threads,
                           stages=STAGES[args.command], H_map=H, controls=controls)
    except (ConfigError, StageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(run)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
