"""Command-line entry point: ``mrbs sim|design|compare|validate``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analysis import OperatingPoint
from .errors import MRBSError, ParseError, ValidationError
from .scenario import (
    DesignSpec,
    check_expectations,
    compare_report,
    design_report,
    load_config,
    run_scenario,
)

EXIT_OK, EXIT_INVALID, EXIT_ENGINE, EXIT_ASSERT = 0, 1, 2, 3


def _load(args):
    cfg, scenario, params = load_config(args.config)
    if getattr(args, "full_length", False):
        scenario = scenario.full_length()
    if getattr(args, "dt", None):
        params = replace(params, dt=args.dt)
        params.check(cfg)
    if getattr(args, "csv_decimation", None):
        params = replace(params, record_decimation=args.csv_decimation)
    return cfg, scenario, params


def _fmt(v):
    return "nan" if v is None or not np.isfinite(v) else f"{v:.4g}"


def cmd_sim(args) -> int:
    cfg, scenario, params = _load(args)
    out = Path(args.out) if args.out else Path("runs") / scenario.name
    try:
        trace, metrics, manifest = run_scenario(cfg, scenario, params, out_dir=out, plots=not args.no_plots)
    except MRBSError as exc:
        print(f"engine error: {exc} (partial trace in {out / 'trace.csv'})", file=sys.stderr)
        return EXIT_ENGINE
    for i, ph in enumerate(metrics.phases):
        powers = " ".join(_fmt(p) for p in ph.p_module_tail)
        print(f"phase {i} [{ph.t0:g}, {ph.t1:g}) s: p_out {_fmt(ph.p_out_tail)} W, module p_b [{powers}] W")
    print(f"efficiency {_fmt(metrics.efficiency)}, max |i_circ| {_fmt(metrics.max_abs_icirc)} A")
    print(f"outputs in {out}")
    if args.check:
        rows = check_expectations(scenario, metrics)
        for e, ok, v in rows:
            print(f"{'PASS' if ok else 'FAIL'} {e.describe()}: got {_fmt(v)}")
        if not all(ok for _, ok, _ in rows):
            return EXIT_ASSERT
    return EXIT_OK


def cmd_design(args) -> int:
    cfg, _, _ = _load(args)
    kw = {k: getattr(args, k) for k in ("v_b_max", "md2", "delta_i_diff", "f_sw") if getattr(args, k) is not None}
    report = design_report(cfg, DesignSpec(**kw))
    print(report.render())
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "design.json").write_text(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def cmd_compare(args) -> int:
    if not (0 < args.rho_min <= args.rho_max <= 0.5) or args.points < 1:
        print("rho grid must satisfy 0 < rho-min <= rho-max <= 0.5 with points >= 1", file=sys.stderr)
        return EXIT_INVALID
    rhos = np.linspace(args.rho_min, args.rho_max, args.points)
    op = OperatingPoint(i_out=args.i_out, m0=args.m0, md2=args.md2)
    report = compare_report(op, rhos)
    print(report.render())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "compare.csv", "w") as fh:
            fh.write(",".join(report.table[0]) + "\n")
            for row in report.table[1:]:
                fh.write(",".join(repr(float(x)) for x in row) + "\n")
        if not args.no_plots:
            from .plotting import render_compare

            render_compare(report.table, out)
    if args.check and not all(report.verdicts.values()):
        return EXIT_ASSERT
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg, scenario, params = _load(args)
    print(f"{args.config}: ok ({cfg.n_modules} modules, {len(scenario.phases())} phases, {scenario.duration:g} s)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrbs", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, sim=False):
        sp.add_argument("config", help="YAML config path or bundled name (scenario1, scenario2)")
        sp.add_argument("--out", help="output directory")
        if sim:
            sp.add_argument("--dt", type=float, help="integration step in seconds")
            sp.add_argument("--full-length", action="store_true", help="run the uncompressed timeline")
            sp.add_argument("--csv-decimation", type=int, help="keep every n-th step in the trace CSV")

    s = sub.add_parser("sim", help="run a scenario")
    common(s, sim=True)
    s.add_argument("--assert", dest="check", action="store_true", help="exit 3 if any expectation fails")
    s.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    s.set_defaults(func=cmd_sim)

    d = sub.add_parser("design", help="component sizing report")
    common(d)
    d.add_argument("--v-b-max", type=float)
    d.add_argument("--md2", type=float)
    d.add_argument("--delta-i-diff", type=float)
    d.add_argument("--f-sw", type=float)
    d.set_defaults(func=cmd_design)

    c = sub.add_parser("compare", help="loss and core-size comparison")
    c.add_argument("--rho-min", type=float, default=0.01)
    c.add_argument("--rho-max", type=float, default=0.5)
    c.add_argument("--points", type=int, default=50)
    c.add_argument("--i-out", type=float, default=50.0)
    c.add_argument("--m0", type=float, default=0.6)
    c.add_argument("--md2", type=float, default=0.05)
    c.add_argument("--out", help="output directory for compare.csv and compare.png")
    c.add_argument("--assert", dest="check", action="store_true", help="exit 3 if a verdict fails")
    c.add_argument("--no-plots", action="store_true")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("validate", help="check a config without running it")
    common(v)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except ParseError as exc:
        print(f"cannot parse configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"invalid option: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except MRBSError as exc:
        print(f"engine error: {exc}", file=sys.stderr)
        return EXIT_ENGINE


if __name__ == "__main__":
    sys.exit(main())
