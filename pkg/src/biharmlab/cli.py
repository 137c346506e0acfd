"""Command line entry point: one subcommand per experiment, JSON + CSV output."""
from __future__ import annotations

import argparse
import csv
import inspect
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from .experiments import RUNNERS

log = logging.getLogger("biharmlab")

COMMANDS = ["exponents", "jump-relations", "harmonic-mms", "harmonic-dirichlet-mms", "harmonic-regularity-mms",
            "adjointness", "biharmonic-mms", "tilde-decay", "decay", "bootstrap4d", "hiding", "atomic-xnorm",
            "norms-selftest"]


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, Fraction):
        return str(x)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return str(x)
    return x


def write_outputs(name, result, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.json").write_text(json.dumps(_jsonable(result), indent=2))
    for tname, rows in (result.get("tables") or {}).items():
        if not rows:
            continue
        keys = list(dict.fromkeys(k for r in rows for k in r))
        with open(out / f"{name}_{tname}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(_jsonable(rows))
    return out


def run(name, **kw):
    fn = RUNNERS[name]
    params = inspect.signature(fn).parameters
    if not any(p.kind == p.VAR_KEYWORD for p in params.values()):
        kw = {k: v for k, v in kw.items() if k in params}
    return fn(**{k: v for k, v in kw.items() if v is not None})


def build_parser():
    ap = argparse.ArgumentParser(prog="biharmlab", description="Biharmonic boundary value experiments on graph domains")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=(RUNNERS[name].__doc__ or name).strip().splitlines()[0]
                           if RUNNERS[name].__doc__ else name)
        p.add_argument("--dim", type=int, help="ambient dimension n")
        p.add_argument("--domain", choices=["flat", "bump", "cone", "tent"], help="graph profile")
        p.add_argument("--h", type=float, help="boundary mesh spacing (coarse level)")
        p.add_argument("--rtrunc", type=float, help="truncation radius of the boundary mesh")
        p.add_argument("--out", default="results", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--tolerance-profile", choices=["strict", "smoke"], default="smoke")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    kw = dict(profile=args.tolerance_profile, dim=args.dim, domain=args.domain, h=args.h,
              rtrunc=args.rtrunc, seed=args.seed)
    try:
        result = run(args.command, **kw)
    except (ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    out = write_outputs(args.command.replace("-", "_"), result, args.out)
    gates = result["gates"]
    for k, v in gates.items():
        print(f"{'PASS' if v else 'FAIL'}  {args.command}: {k}")
    print(f"results written to {out}")
    return 0 if all(gates.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
