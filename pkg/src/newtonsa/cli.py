"""Command-line entry point: ``newtonsa <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback

from . import __version__
from .experiments import DEFAULT_PRESET, PRESETS, ConfigError, ExperimentConfig, preset, run_experiment
from .plotting import PlotError, emit_plot

GALLERY = ("running-mean", "t-quantile", "eb", "am", "saem")
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _common(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--preset", help="named built-in config")
    p.add_argument("--seed", type=int, help="base seed (unsigned 64-bit)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--reps", type=int, help="number of replications")
    p.add_argument("--n", type=int, help="sample size or iteration count")
    p.add_argument("--workers", type=int, help="parallel worker processes")
    p.add_argument("--timing", action="store_true", help="fill wall_ms (makes summaries non-reproducible)")
    p.add_argument("--plot", action="store_true", help="also write SVG plots")
    p.add_argument("--quiet", action="store_true", help="suppress progress output")


def build_parser():
    ap = argparse.ArgumentParser(prog="newtonsa", description="Stochastic-approximation experiments.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("newton", "Newton's recursive estimate on a finite or compact grid"),
        ("npp", "N+P with an estimated sampling variance"),
        ("compare", "recursive estimate against NPML and DP posterior mean"),
        ("samc-ising", "SAMC density of states for the 1-D Ising model"),
        ("conjecture", "misspecified-grid divergence against its infimum"),
    ):
        _common(sub.add_parser(name, help=help_))
    g = sub.add_parser("gallery", help="small SA drivers")
    g.add_argument("name", choices=GALLERY)
    _common(g)
    pl = sub.add_parser("plot", help="render a trace or summary CSV to SVG")
    pl.add_argument("csv")
    pl.add_argument("--out", required=True, help="SVG path")
    pl.add_argument("--type", choices=("line", "box"), default="line")
    pl.add_argument("--x")
    pl.add_argument("--y", nargs="+")
    pl.add_argument("--group")
    pl.add_argument("--reference", type=float)
    pl.add_argument("--title")
    pl.add_argument("--quiet", action="store_true")
    return ap


def _kinds_for(command, gallery_name=None):
    if command == "newton":
        return ("newton-finite", "newton-compact")
    if command == "gallery":
        return (f"gallery:{gallery_name}",)
    return (command,)


def resolve_config(args) -> ExperimentConfig:
    kinds = _kinds_for(args.command, getattr(args, "name", None))
    overrides = dict(seed=args.seed, out=args.out, reps=args.reps, n=args.n, workers=args.workers)
    if args.timing:
        overrides["timing"] = True
    if args.plot:
        overrides["plot"] = True
    if args.config and args.preset:
        raise ConfigError("--config and --preset are exclusive")
    if args.config:
        cfg = ExperimentConfig.load(args.config).replace(**overrides)
    else:
        name = args.preset or (kinds[0] if args.command == "gallery" else DEFAULT_PRESET[args.command])
        if args.command == "newton" and name in PRESETS and PRESETS[name]["kind"] == "compare":
            d = dict(PRESETS[name], kind="newton-finite")
            d.pop("options", None)
            d.setdefault("out", os.path.join("out", name + "-newton"))
            d.update({k: v for k, v in overrides.items() if v is not None})
            cfg = ExperimentConfig.from_dict(d)
        else:
            cfg = preset(name, **overrides)
    if cfg.kind not in kinds:
        raise ConfigError(f"kind: {cfg.kind!r} does not match subcommand {args.command!r}")
    return cfg


def _where(exc):
    frames = traceback.extract_tb(exc.__traceback__)
    for fr in reversed(frames):
        if os.sep + "newtonsa" + os.sep in fr.filename:
            return "newtonsa." + os.path.splitext(os.path.basename(fr.filename))[0]
    return "newtonsa"


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            spec = {"type": args.type}
            for k in ("x", "y", "group", "reference", "title"):
                v = getattr(args, k)
                if v is not None:
                    spec[k] = v
            if args.type == "box" and "y" in spec:
                if len(spec["y"]) != 1:
                    raise PlotError("box plots take a single --y column")
                spec["y"] = spec["y"][0]
            emit_plot(args.csv, spec, args.out)
            if not args.quiet:
                print(args.out)
            return 0
        cfg = resolve_config(args)
        res = run_experiment(cfg, quiet=args.quiet)
        if not args.quiet:
            for f in res.files:
                print(f)
        return 0
    except (ConfigError, PlotError) as exc:
        print(f"newtonsa: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"newtonsa: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, FloatingPointError) as exc:
        it = getattr(exc, "iteration", None)
        ctx = f" at iteration {it}" if it is not None else ""
        print(f"newtonsa: numeric failure in {_where(exc)}{ctx}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
