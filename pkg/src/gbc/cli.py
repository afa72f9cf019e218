"""Command line: ``gbc run <config> [--jobs N] [--out DIR]``, ``gbc models``, ``gbc selftest``."""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .gaussian import UnsupportedRankError
from .kernel import DegenerateKernelError
from .models import ModelError, catalog
from .spectral import EigenSolveError, EmptyEnsembleError
from .zeros import TransversalityError

EXIT_OK, EXIT_CONFIG, EXIT_DEGENERATE, EXIT_ACCEPTANCE = 0, 2, 3, 4

NUMERICAL_ERRORS = (DegenerateKernelError, TransversalityError, EmptyEnsembleError, EigenSolveError,
                    ModelError, UnsupportedRankError, FloatingPointError, np.linalg.LinAlgError)


def _run_config(cfg: ExperimentConfig, jobs, out, quiet=False) -> int:
    from .experiments import run
    try:
        rep = run(cfg, jobs)
    except NUMERICAL_ERRORS as e:
        mod = type(e).__module__.rsplit(".", 1)[-1]
        print(f"gbc: numerical degeneracy in {mod}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DEGENERATE
    if out:
        rep.write(out)
    if not quiet:
        for v in rep.verdicts:
            print(v.line())
        for n in rep.notes:
            print(f"note: {n}")
        what = cfg.experiment if cfg.experiment == "pfaffian-selftest" else f"{cfg.experiment} on {cfg.model}"
        print(f"{what}: {'all verdicts pass' if rep.passed else 'FAILED'} "
              f"({rep.wall_clock:.1f} s)" + (f"; wrote {out}" if out else ""))
    return EXIT_OK if rep.passed else EXIT_ACCEPTANCE


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        print(f"gbc: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or cfg.out
    if not out:
        out = os.path.join("runs", f"{cfg.experiment}-{cfg.model}")
    if args.out:
        cfg = dataclasses.replace(cfg, out=args.out)
    return _run_config(cfg, args.jobs, out)


def cmd_models(args) -> int:
    print(catalog())
    return EXIT_OK


def cmd_selftest(args) -> int:
    cfg = ExperimentConfig("pfaffian-selftest", seed=args.seed, trials=args.trials,
                           mc_draws=args.draws, arrays=args.arrays)
    return _run_config(cfg, 1, args.out)


def build_parser():
    p = argparse.ArgumentParser(prog="gbc", description="Random bundle sections: geometry, zeros and reconstruction.")
    p.add_argument("--version", action="version", version=f"gbc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes (default: logical cores)")
    r.add_argument("--out", default=None, help="output directory (overrides the config)")
    r.set_defaults(func=cmd_run)
    m = sub.add_parser("models", help="list the bundle models")
    m.set_defaults(func=cmd_models)
    s = sub.add_parser("selftest", help="Pfaffian and Gaussian determinant-average checks")
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--trials", type=int, default=200)
    s.add_argument("--draws", type=int, default=200_000)
    s.add_argument("--arrays", type=int, default=20)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        print("gbc: --jobs must be positive", file=sys.stderr)
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
