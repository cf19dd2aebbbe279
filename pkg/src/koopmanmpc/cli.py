"""Batch command-line interface for the learning and control experiments."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config, write_default_config
from . import experiments


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="experiment config file")
    parser.add_argument("--seed", type=int, default=None, help="override the seed")
    parser.add_argument("--profile", choices=["quick", "full"], default=None,
                        help="task-count profile")
    parser.add_argument("--out", default="runs", help="output directory")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="koopmanmpc",
        description="Learn lifted bilinear models and run the MPC experiment suite.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, descr in [
            ("collect", "collect the training dataset"),
            ("fit", "fit DMD / EDMD / bEDMD models"),
            ("eval-open-loop", "open-loop prediction evaluation"),
            ("trajgen", "trajectory-generation comparison"),
            ("closed-loop", "closed-loop comparison"),
            ("report", "write the summary report and figures"),
            ("verify", "recompute summary statistics from raw artifacts"),
            ("init-config", "write a default configuration file")]:
        p = sub.add_parser(name, help=descr)
        _add_common(p)
        if name == "fit":
            p.add_argument("--method", choices=["dmd", "edmd", "bedmd", "all"],
                           default="all")
        if name == "report":
            p.add_argument("--no-figures", action="store_true",
                           help="skip figure rendering")
        if name == "init-config":
            p.add_argument("--path", default="experiment.cfg")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    if args.command == "init-config":
        write_default_config(args.path)
        print(f"wrote default config to {args.path}")
        return 0

    cfg = load_config(args.config, seed=args.seed, profile=args.profile)
    out = args.out

    if args.command == "collect":
        dataset = experiments.run_collect(cfg, out)
        print(f"collected {dataset.num_trajectories} trajectories "
              f"({dataset.trajectories[0].num_steps} samples each) -> {out}")
    elif args.command == "fit":
        methods = (experiments.LEARNED_METHODS if args.method == "all"
                   else [args.method])
        models = experiments.run_fit(cfg, out, methods)
        print(f"fitted models: {', '.join(models)} -> {out}")
    elif args.command == "eval-open-loop":
        summary = experiments.run_open_loop_eval(cfg, out)
        for method, stats in summary.items():
            print(f"{method}: mse {stats['mse_mean']:.4g} "
                  f"(std {stats['mse_std']:.4g})")
    elif args.command == "trajgen":
        summary = experiments.run_trajectory_generation(cfg, out)
        for method, stats in summary.items():
            print(f"{method}: terminal error {stats['terminal_error_mean']:.4g}, "
                  f"effort {stats['effort_mean']:.4g}, "
                  f"failures {stats['failures']}")
    elif args.command == "closed-loop":
        summary = experiments.run_closed_loop(cfg, out)
        for method, stats in summary.items():
            print(f"{method}: realized cost {stats['realized_cost_mean']:.4g}, "
                  f"mean step time {stats['comp_time_ms_mean']:.3g} ms, "
                  f"failures {stats['failures']}")
    elif args.command == "report":
        text = experiments.emit_report(cfg, out, make_figures=not args.no_figures)
        print(text)
    elif args.command == "verify":
        problems = experiments.verify(out)
        if problems:
            for p in problems:
                print(f"MISMATCH: {p}")
            return 1
        print("all summary statistics verified against raw artifacts")
    return 0


if __name__ == "__main__":
    sys.exit(main())
