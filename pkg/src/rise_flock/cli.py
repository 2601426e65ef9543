"""Command-line front end: ``rise-flock {run,certify,sweep,plot}``.

Exit codes: 0 ok, 1 validation error, 2 divergence, 3 certificate failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from rise_flock import config as cfgmod
from rise_flock import svgplot, workflows
from rise_flock.errors import DivergenceError, NumericalError, RiseFlockError, ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGENCE, EXIT_CERTIFICATE = 0, 1, 2, 3


def _seeds(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("--seeds is empty")
    return seeds


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the validation code, keeping 2 for divergence."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="rise-flock", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def scenario_args(p):
        p.add_argument("--config", help="scenario JSON (default: bundled eight-agent scenario)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry by dotted key, e.g. gains.k4=0 (repeatable)")

    scenario_args(sub.add_parser("run", help="simulate and write trajectory, metrics and certificate"))
    scenario_args(sub.add_parser("certify", help="check the sufficient gain conditions"))
    p = sub.add_parser("sweep", help="independent runs over several seeds")
    scenario_args(p)
    p.add_argument("--seeds", type=_seeds, default=list(range(10)), help="comma-separated seeds (default 0..9)")
    p = sub.add_parser("plot", help="render SVG plots from a trajectory CSV")
    p.add_argument("csv", help="trajectory.csv written by 'run'")
    p.add_argument("--kind", choices=svgplot.KINDS + ("all",), default="all")
    p.add_argument("--out", help="output directory (default: next to the CSV)")
    p.add_argument("--threshold", type=float, default=0.05, help="guide line for error_norms [m]")
    return parser


def _load(args):
    if args.config:
        return cfgmod.load(args.config, args.overrides)
    return cfgmod.bundled_scenario(args.overrides)


def _cmd_run(args):
    config = _load(args)
    out = args.out or "."
    result = workflows.run(config, out)
    print(json.dumps(result.metrics.to_dict(), indent=2))
    print(f"wrote trajectory.csv, metrics.json, certificate.json to {out}")
    return EXIT_OK


def _cmd_certify(args):
    result = workflows.certify(_load(args), args.out)
    for line in result.summary_lines():
        print(line)
    if result.all_pass:
        print("all gain conditions pass")
        return EXIT_OK
    print("gain conditions FAILED", file=sys.stderr)
    return EXIT_CERTIFICATE


def _cmd_sweep(args):
    result = workflows.sweep(_load(args), args.seeds, args.out)
    for r in result["runs"]:
        if r["error"]:
            print(f"seed {r['seed']}: diverged ({r['error']})")
        else:
            m = r["metrics"]
            print(f"seed {r['seed']}: rms={m['cumulative_rms_e']:.6g} converged_at={m['convergence_time_005']}")
    print(json.dumps(result["aggregate"], indent=2))
    return EXIT_OK


def _cmd_plot(args):
    kinds = svgplot.KINDS if args.kind == "all" else (args.kind,)
    out = args.out or str(Path(args.csv).resolve().parent)
    workflows.plot(args.csv, kinds, out, threshold=args.threshold)
    print(f"wrote {', '.join(k + '.svg' for k in kinds)} to {out}")
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "certify": _cmd_certify, "sweep": _cmd_sweep, "plot": _cmd_plot}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except RiseFlockError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
