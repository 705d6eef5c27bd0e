"""Command-line entry point.

Subcommands: train-teacher, distill, export-curves, gradcheck.
Log verbosity via the HKDISTILL_LOG environment variable (DEBUG/INFO/...).
Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numerical abort,
5 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .autodiff import NumericalError
from .config import ConfigError, parse_config
from .data import DataError
from .trainer import distill, export_curves, train_teacher
from .verify import run_all, set_corrupt_ops

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4
EXIT_CHECK = 5


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hkdistill")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="path to INI config file")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--mode", help="training mode (overrides config)")

    sub.add_parser("train-teacher", parents=[common],
                   help="pre-train the teacher with cross-entropy only")

    p_distill = sub.add_parser("distill", parents=[common],
                               help="distill the student in the configured mode")
    p_distill.add_argument("--teacher", required=True, help="teacher checkpoint path")

    p_curves = sub.add_parser("export-curves", help="re-emit weight curves for a run")
    p_curves.add_argument("run_directory")

    p_check = sub.add_parser("gradcheck", help="run the finite-difference verification suite")
    p_check.add_argument("--seeds", type=int, default=5, help="number of seeds")
    p_check.add_argument("--corrupt-op", default=None, help=argparse.SUPPRESS)
    return parser


def _load_config(args):
    overrides = {"out_dir": args.out, "seed": args.seed, "mode": args.mode}
    return parse_config(args.config, overrides)


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("HKDISTILL_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "train-teacher":
            ckpt = train_teacher(_load_config(args))
            print(f"teacher checkpoint written to {ckpt}")
            return EXIT_OK

        if args.command == "distill":
            if not os.path.exists(args.teacher):
                print(f"error: teacher checkpoint not found: {args.teacher}", file=sys.stderr)
                return EXIT_IO
            cfg = _load_config(args)
            acc = distill(cfg, args.teacher)
            print(f"mode={cfg.mode} final eval accuracy {acc:.4f}")
            return EXIT_OK

        if args.command == "export-curves":
            iter_path, epoch_path = export_curves(args.run_directory)
            print(f"wrote {iter_path}\nwrote {epoch_path}")
            return EXIT_OK

        if args.command == "gradcheck":
            if args.corrupt_op:
                set_corrupt_ops([args.corrupt_op])
            results = run_all(seeds=tuple(range(args.seeds)))
            failed = False
            for r in results:
                status = "ok" if r.passed else "FAIL"
                print(f"{status:4s} {r.name:<20s} max rel err {r.error:.3e} (tol {r.tolerance:g})")
                failed = failed or not r.passed
            return EXIT_CHECK if failed else EXIT_OK

    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
