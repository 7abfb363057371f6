"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import load_config
from .exceptions import ConfigError, LidarFuseError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser():
    parser = _Parser(prog="lidarfuse", description="LiDAR odometry, SLAM and evaluation")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("-c", "--config", help="sectioned key=value config file")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
            help="override one config value (repeatable)",
        )
        p.add_argument("-o", "--output", help="output directory (pipeline.output)")
        p.add_argument("--seed", type=int, help="global seed (pipeline.seed)")
        return p

    add("simulate", "write synthetic sequences in the KITTI layout")
    add("train", "train the odometry network")
    add("tune", "Hyperband search over training hyperparameters")
    for name, help_ in (("odometry", "predict trajectories"), ("slam", "odometry plus loop closure")):
        p = add(name, help_)
        p.add_argument("--train", action="store_true", help="train before predicting")
        p.add_argument("--adapt-every", type=int, help="INAF adaptation period in frames (0 disables)")
    p = add("eval", "metrics of an estimated trajectory")
    p.add_argument("--gt", required=True, help="ground-truth KITTI pose file")
    p.add_argument("--est", required=True, help="estimated KITTI pose file")
    p.add_argument("--plot-data", action="store_true", help="also write per-frame error CSV")
    return parser


def _config(args):
    overrides = list(args.overrides)
    if args.output:
        overrides.append(f"pipeline.output={args.output}")
    if args.seed is not None:
        overrides.append(f"pipeline.seed={args.seed}")
    if getattr(args, "adapt_every", None) is not None:
        overrides.append(f"pipeline.adapt_every={args.adapt_every}")
    return load_config(args.config, overrides)


def run(args):
    from . import pipeline

    cfg = _config(args)
    if args.command == "simulate":
        out = pipeline.run_simulate(cfg)
        print(f"wrote {out}")
    elif args.command == "train":
        model = pipeline.run_train(cfg)
        print(f"best validation loss {model.history.best_val:.6g} at epoch {model.history.best_epoch}")
    elif args.command == "tune":
        result = pipeline.run_tune(cfg)
        print(f"best config {result.best_config} (validation MAE {result.best_loss:.6g})")
    elif args.command == "odometry":
        for out in pipeline.run_odometry(cfg, train_first=args.train):
            print(f"{out.name}: {len(out.poses)} poses")
    elif args.command == "slam":
        for out in pipeline.run_slam(cfg, train_first=args.train):
            print(f"{out.name}: {len(out.raw)} poses, {len(out.loops)} loop edges")
    elif args.command == "eval":
        for path in (args.gt, args.est):
            if not os.path.exists(path):
                raise ConfigError(f"{path} does not exist")
        res = pipeline.run_eval(cfg, args.gt, args.est, plot_data=args.plot_data)
        print(
            f"RPE {res.overall_rmse:.6g} m, translation {res.kitti_trans_pct:.4g} %, "
            f"rotation {res.kitti_rot_deg_per_100m:.4g} deg/100m"
        )


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        run(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LidarFuseError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
