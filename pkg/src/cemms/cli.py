"""Command-line entry point.

    cemms run <config>      sweep table for a config file
    cemms decay <config>    decay profiles and correction convergence
    cemms synth <spec> -o <file>   write a synthetic medium mask
    cemms --version

Exit codes: 0 success, 2 configuration error, 3 solver failure.
CEMMS_THREADS overrides the worker count.
"""

import argparse
import sys

from cemms import __version__
from cemms.experiments import ConfigError, parse_config, run_decay_study, run_experiment
from cemms.fem import SolverFailure
from cemms.ms_solver import CoarseSystemError


def _parse_synth_spec(spec):
    opts = {"style": "channels", "n": 80, "density": 0.15, "seed": 0}
    for tok in spec.split(","):
        if not tok.strip():
            continue
        if "=" not in tok:
            raise ConfigError(f"synth spec token {tok!r} must be key=value")
        key, val = (s.strip() for s in tok.split("=", 1))
        if key == "style":
            opts["style"] = val
        elif key == "n":
            opts["n"] = int(val)
        elif key == "density":
            opts["density"] = float(val)
        elif key == "seed":
            opts["seed"] = int(val)
        else:
            raise ConfigError(f"unknown synth spec key {key!r}")
    return opts


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="cemms",
        description="Multiscale solver and experiment harness for high-contrast "
                    "elliptic problems")
    parser.add_argument("--version", action="version", version=f"cemms {__version__}")
    sub = parser.add_subparsers(dest="command")

    p_run = sub.add_parser("run", help="run a sweep experiment")
    p_run.add_argument("config")
    p_run.add_argument("--workers", type=int, default=0)
    p_run.add_argument("--allow-large", action="store_true")

    p_decay = sub.add_parser("decay", help="run a decay study")
    p_decay.add_argument("config")
    p_decay.add_argument("--workers", type=int, default=0)
    p_decay.add_argument("--allow-large", action="store_true")

    p_synth = sub.add_parser("synth", help="write a synthetic medium mask")
    p_synth.add_argument("spec", help="e.g. style=channels,n=80,density=0.2,seed=7")
    p_synth.add_argument("-o", "--output", required=True)

    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2

    try:
        if args.command == "synth":
            from cemms.media import synth_mask, write_grid_file
            opts = _parse_synth_spec(args.spec)
            mask = synth_mask(opts["n"], opts["style"], opts["density"], opts["seed"])
            write_grid_file(args.output, mask, fmt="%d")
            print(f"wrote {args.output} ({opts['n']}x{opts['n']}, "
                  f"fill {mask.mean():.3f})")
            return 0
        cfg = parse_config(args.config, allow_large=args.allow_large)
        if args.workers:
            cfg.workers = args.workers
        runner = run_experiment if args.command == "run" else run_decay_study
        outputs = runner(cfg)
        for name, path in outputs.items():
            print(f"{name}: {path}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SolverFailure, CoarseSystemError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
