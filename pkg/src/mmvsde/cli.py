"""Command-line front end.

Exit status: 0 success, 1 validation error, 2 failed assertion-grade
diagnostic, 3 non-convergence under ``--strict``.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import STUDY_KINDS, builtin_names, load
from .errors import (ConfigurationError, EmptySampleError, InvalidInputError, ScenarioError, UsageError)
from .io import read_points, write_json
from .measure import EmpiricalMeasure, wasserstein2

OUT_ENV = "MMVSDE_OUT"
W2_METHODS = ("exact_1d", "exact_assignment", "entropic")

log = logging.getLogger("mmvsde")


def _levels(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must be comma-separated integers, got {text!r}")


def _run_flags(p):
    p.add_argument("config", help="scenario file or built-in scenario name")
    p.add_argument("--seed", type=int, help="replace the scenario's seed list with this seed")
    p.add_argument("--particles", type=int, help="ensemble size N")
    p.add_argument("--step", type=float, help="base step h")
    p.add_argument("--levels", type=_levels, help="mollification levels for the cascade, e.g. 2,4,8,16")
    p.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<scenario> or ./mmvsde-out/<scenario>)")
    p.add_argument("--strict", action="store_true", help="exit 3 when a convergence flag is false")
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="table format")
    p.add_argument("--workers", type=int, default=1, help="cap on worker threads (results do not depend on it)")
    p.add_argument("--backend", choices=("cython", "python"), help="kernel backend override")


def build_parser():
    parser = argparse.ArgumentParser(prog="mmvsde", description="Particle schemes for multivalued McKean-Vlasov "
                                     "SDEs with jumps.")
    parser.add_argument("--version", action="version", version=f"mmvsde {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run the study named in the scenario")
    _run_flags(p)
    for kind in STUDY_KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} study on a scenario")
        _run_flags(p)
    p = sub.add_parser("w2", help="W2 distance between two CSV point clouds")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--method", choices=W2_METHODS, help="default: exact in 1-D, assignment up to 512 points, "
                   "entropic otherwise")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", help="also write the value as JSON to this file")
    sub.add_parser("scenarios", help="list the built-in scenarios")
    return parser


def output_dir(args, name):
    if args.out:
        return Path(args.out)
    base = os.environ.get(OUT_ENV)
    return Path(base if base else "mmvsde-out") / name


def _summary_lines(report):
    kind = report["study"]
    for s in report.get("seeds", []):
        head = f"seed {s['seed']}:"
        if kind == "simulate":
            mean = ", ".join("%.6g" % v for v in s["final_mean"])
            se = ", ".join("%.3g" % v for v in s["final_mean_se"])
            yield f"{head} mean at T = [{mean}] (SE [{se}])"
        elif kind == "picard":
            yield f"{head} converged={s['converged']} after {s['iterations']} iterations, last gap " \
                  f"{s['gaps'][-1]:.4g}"
        elif kind == "cascade":
            yield f"{head} e = [{', '.join('%.4g' % v for v in s['errors'])}] nonincreasing={s['nonincreasing']}"
        elif kind == "coupled":
            yield f"{head} g(0) = {s['g0']:.4g}, g(T) = {s['g_final']:.4g}, bit_exact={s['bit_exact']}"
        elif kind == "diagnose":
            for c in s["checks"]:
                status = ("PASS" if c["passed"] else "FAIL") if "passed" in c else "report"
                yield f"{head} {c['name']:<13} {c['grade']:<9} {status}"


def cmd_run(args):
    from .runner import run_scenario

    study = None if args.command == "run" else args.command
    sc = load(args.config, workers=args.workers, backend=args.backend, seed=args.seed, particles=args.particles,
              step=args.step, levels=args.levels, study=study)
    out = output_dir(args, sc.name)
    status, report = run_scenario(sc, out, args.format, args.strict, particles_fixed=args.particles is not None)
    for line in _summary_lines(report):
        print(line)
    print(f"artifacts written to {out}")
    return status


def cmd_w2(args):
    a, wa = read_points(args.a)
    b, wb = read_points(args.b)
    value = wasserstein2(EmpiricalMeasure(a, wa), EmpiricalMeasure(b, wb), method=args.method)
    if args.format == "json":
        print(f'{{"w2": {value!r}}}')
    else:
        print("%.17g" % value)
    if args.out:
        write_json(args.out, {"w2": value, "method": args.method or "auto"})
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s: %(message)s")
    try:
        if args.command == "scenarios":
            for name in builtin_names():
                print(name)
            return 0
        if args.command == "w2":
            return cmd_w2(args)
        return cmd_run(args)
    except (ConfigurationError, InvalidInputError, UsageError, EmptySampleError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
