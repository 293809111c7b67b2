"""Command-line front end.

One experiment per invocation.  Reports are JSON, descent traces CSV,
fields BHF1; figures are PNG unless suppressed.  Exit codes: 0 when
every hard check passes (unresolved and flagged rows are listed but do
not fail the run), 1 when any check fails, 2 on errors.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import merged_config
from .errors import BiharmError, ConfigError

EXPERIMENTS = ("validate", "minimize", "topology", "monotonicity", "dumbbell")

_STATUS_TAG = {"pass": "PASS", "fail": "FAIL",
               "unresolved": "UNRESOLVED", "flagged": "FLAGGED"}


def _configure_threads():
    # the one environment knob: worker thread count for the kernels
    want = os.environ.get("BIHARM_NUM_THREADS")
    if not want:
        return
    try:
        import numba
        numba.set_num_threads(max(1, int(want)))
    except (ImportError, ValueError):
        pass


def _fmt_quantity(x):
    if isinstance(x, float):
        return f"{x:.6g}"
    if isinstance(x, dict):
        inner = ", ".join(f"{k}={_fmt_quantity(v)}" for k, v in x.items())
        return "{" + inner + "}"
    if isinstance(x, (list, tuple)):
        return "[" + ", ".join(_fmt_quantity(v) for v in x) + "]"
    return str(x)


def _print_check(row):
    parts = [f"{_STATUS_TAG.get(row['status'], row['status'].upper()):<10}",
             f"{row['name']:<32}"]
    if "value" in row:
        parts.append(_fmt_quantity(row["value"]))
    if "target" in row:
        parts.append(f"vs {_fmt_quantity(row['target'])}")
    if "tol" in row:
        parts.append(f"(tol {_fmt_quantity(row['tol'])})")
    if "note" in row and "value" not in row:
        parts.append(row["note"])
    print("  ".join(parts))


def _run_experiment(name, args):
    cfg = merged_config(name, args.config,
                        h=args.resolution, seed=args.seed)
    if args.no_figures:
        cfg["figures"] = False
    from . import experiments
    driver = getattr(experiments, f"run_{name}")
    report = driver(cfg, out=args.out)
    if not args.quiet:
        for row in report["checks"]:
            _print_check(row)
    if args.out is not None:
        path = experiments.write_report(report, args.out)
        if not args.quiet:
            print(f"report written to {path}")
    n_fail = sum(1 for c in report["checks"] if c["status"] == "fail")
    print(f"{name}: {report['status']} "
          f"({len(report['checks'])} checks, {n_fail} failed, "
          f"{report['wall_time']:.1f}s)")
    return 0 if report["status"] == "pass" else 1


def _run_convert(args):
    from .fieldfile import convert
    dst = convert(args.src, args.dst)
    if not args.quiet:
        print(f"wrote {dst}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="biharm",
        description="Lattice Hessian energies, singularity topology, and "
                    "relaxed minimization for sphere-valued maps.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        q = sub.add_parser(name, help=f"run the {name} experiment")
        q.add_argument("--config", metavar="PATH",
                       help="JSON config file; defaults are used otherwise")
        q.add_argument("--out", metavar="DIR",
                       help="output directory for report, fields, figures")
        q.add_argument("--seed", type=int, default=None, metavar="N")
        q.add_argument("--resolution", type=float, default=None, metavar="H",
                       help="lattice spacing override")
        q.add_argument("--quiet", action="store_true")
        q.add_argument("--no-figures", action="store_true",
                       help="skip PNG rendering")
    c = sub.add_parser("convert", help="convert a field between BHF1 and CSV")
    c.add_argument("src")
    c.add_argument("dst")
    c.add_argument("--quiet", action="store_true")
    return p


def main(argv=None):
    _configure_threads()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "convert":
            return _run_convert(args)
        return _run_experiment(args.command, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except BiharmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
