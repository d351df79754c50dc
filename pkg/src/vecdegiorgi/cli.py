"""Command-line entry point: ``run``, ``verify-ops`` and ``report-merge``."""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .nfunc import NFunction, verify_nfunc_inequalities
from .report import emit_report, merge_reports
from .scenario import ScenarioError, load_scenario, run_scenario, write_trace
from .solver import SolverStagnation
from .vecops import verify_jacobian_inequalities, verify_pointwise_inequalities

EXIT_OK = 0
EXIT_CERT_FAIL = 1
EXIT_SCHEMA = 2
EXIT_STAGNATION = 3
EXIT_IO = 4

OUT_ENV = "VECDG_OUT"

OPS_FAMILIES = [NFunction.power(1.5), NFunction.power(2.0), NFunction.power(3.0),
                NFunction.power_sum(1.5, 3.0)]
OPS_DIMS = [1, 2, 3, 5]
JACOBIAN_SHAPES = [(1, 1), (2, 1), (2, 2), (2, 3), (3, 3)]


def _out_dir(args_out, config_out, name) -> Path:
    if args_out:
        return Path(args_out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    if config_out:
        return Path(config_out)
    return Path("out") / name


def cmd_run(args) -> int:
    try:
        sc = load_scenario(args.config)
    except ScenarioError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except OSError as exc:
        print(f"cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_IO
    out = _out_dir(args.out, sc.config.get("output"), sc.name)
    try:
        result = run_scenario(sc, out, seed=args.seed,
                              deterministic=True if args.deterministic else None)
    except ScenarioError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except SolverStagnation as exc:
        print(f"solver stagnated: {exc}", file=sys.stderr)
        tr = exc.trace
        for k, (e, r) in enumerate(zip(tr.energies[-10:], tr.residuals[-10:])):
            print(f"  energy={e:.17g} residual={r:.6g}", file=sys.stderr)
        try:
            out.mkdir(parents=True, exist_ok=True)
            write_trace(tr, out)
        except OSError:
            pass
        return EXIT_STAGNATION
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO
    for rep in result.reports:
        print(rep.summary_line())
    if not result.trace.converged:
        print(f"solver did not converge: {result.trace.message}", file=sys.stderr)
        return EXIT_STAGNATION
    return EXIT_OK if result.passed else EXIT_CERT_FAIL


def cmd_verify_ops(args) -> int:
    reports = []
    trials = args.trials
    for N in OPS_DIMS:
        reports.append(verify_pointwise_inequalities(N, trials or 100_000, args.seed))
    for n, N in JACOBIAN_SHAPES:
        reports.append(verify_jacobian_inequalities(n, N, trials or 10_000, args.seed))
    for phi in OPS_FAMILIES:
        reports.append(verify_nfunc_inequalities(phi, trials or 10_000, args.seed))
    for rep in reports:
        print(rep.summary_line())
    if args.out:
        try:
            emit_report(reports, args.out)
        except OSError as exc:
            print(f"i/o failure: {exc}", file=sys.stderr)
            return EXIT_IO
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CERT_FAIL


def cmd_report_merge(args) -> int:
    try:
        merge_reports(args.dirs, args.out)
    except (OSError, ValueError, KeyError) as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vecdegiorgi",
                                 description="Vectorial De Giorgi certificates for Orlicz energies.")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="solve a scenario and run its certificates")
    run.add_argument("config", help="scenario JSON file")
    run.add_argument("--out", help="output directory")
    run.add_argument("--deterministic", action="store_true", help="fixed-order reductions")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.set_defaults(func=cmd_run)

    ops = sub.add_parser("verify-ops", help="operator and N-function inequality suites")
    ops.add_argument("--trials", type=int, help="random trials per suite")
    ops.add_argument("--seed", type=int, default=0)
    ops.add_argument("--out", help="write report.json and summary.csv here")
    ops.set_defaults(func=cmd_verify_ops)

    merge = sub.add_parser("report-merge", help="combine report.json files")
    merge.add_argument("dirs", nargs="+", help="run directories")
    merge.add_argument("--out", default="merged", help="output directory")
    merge.set_defaults(func=cmd_report_merge)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
