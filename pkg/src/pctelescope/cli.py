"""Command-line entry point.

::

    pctelescope solve --ranks 8 --problem poisson3d --npoints 9,9,9 --preset truncation -- -ksp_monitor
    pctelescope profile --ranks 8 --npoints 17,17,17 --preset repartitioned_coarse --sweep r=2,4,8 --csv t.csv

Exit status: 0 converged, 2 diverged, 1 configuration error.
"""
from __future__ import annotations

import argparse
import sys
import warnings

from .errors import ConfigurationError
from .grid import GridError
from .harness import PRESETS, ProblemSpec, emit_csv, emit_table, preset_options, run_options
from .options import OptionsParseError, parse_file
from .problems import KINDS


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _param(text: str) -> tuple[str, int]:
    key, sep, val = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    try:
        return key, int(val)
    except ValueError:
        raise argparse.ArgumentTypeError(f"placeholder {key} needs an integer value") from None


def _sweep(text: str) -> tuple[str, list[int]]:
    key, sep, vals = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected NAME=V1,V2,..., got {text!r}")
    return key, list(_ints(vals))


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ranks", type=int, default=1)
    p.add_argument("--problem", choices=KINDS, default="poisson3d")
    p.add_argument("--npoints", type=_ints, default=(9, 9, 9), help="vertices per axis, e.g. 17,17,17")
    p.add_argument("--dof", type=int, default=None)
    p.add_argument("--contrast", type=float, default=1.0e3, help="k(z) contrast for poisson3d_varcoef")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--param", type=_param, action="append", default=[], metavar="NAME=VALUE",
                   help="bind a preset placeholder (N, N1, N2, N3, r, r2, rn, nc, overlap)")
    p.add_argument("--options-file", default=None)
    p.add_argument("--clock", choices=("wall", "model"), default="wall",
                   help="'model' gives run-to-run identical timings")
    p.add_argument("--csv", default=None)
    p.add_argument("--forcing", action="store_true", help="sample the continuous forcing instead of A u*")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pctelescope", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("solve", help="solve one problem and print its timing record"))
    prof = sub.add_parser("profile", help="sweep one preset placeholder and tabulate the records")
    _common(prof)
    prof.add_argument("--sweep", type=_sweep, required=True, metavar="NAME=V1,V2,...")
    return ap


def _tokens(args, params: dict, extra: list[str]) -> list[str]:
    tokens = preset_options(args.preset, args.ranks, **params) if args.preset else []
    if args.options_file:
        tokens += parse_file(args.options_file).serialize()
    return tokens + extra


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    extra: list[str] = []
    if "--" in argv:
        cut = argv.index("--")
        argv, extra = argv[:cut], argv[cut + 1:]
    args = build_parser().parse_args(argv)
    try:
        spec = ProblemSpec(kind=args.problem, npoints=args.npoints, dof=args.dof,
                           contrast=args.contrast, manufactured=not args.forcing)
        params = dict(args.param)
        runs = [params]
        if args.command == "profile":
            key, values = args.sweep
            runs = [{**params, key: v} for v in values]
        results = []
        for p in runs:
            with warnings.catch_warnings():
                warnings.simplefilter("default")
                res = run_options(_tokens(args, p, extra), args.ranks, spec, clock=args.clock)
            for key in res.unused:
                print(f"warning: option -{key} was never used", file=sys.stderr)
            results.append(res)
    except (ConfigurationError, GridError, OptionsParseError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    records = [r.record for r in results]
    print(emit_table(records))
    for r in results:
        print(f"converged_reason={r.report.converged_reason} iterations={r.report.iterations} "
              f"fused_levels={r.record.extra['fused_levels']}")
    if args.csv:
        emit_csv(records, args.csv)
    return 0 if all(r.report.converged for r in results) else 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
