"""Command-line entry point: ``causal-transfer <command> [options]``."""
import argparse
import json
import os
import sys

from .harness import (StageError, cmd_bounds, cmd_cluster, cmd_example1, cmd_gen_expert,
                      cmd_pipeline, cmd_run, format_example1, load_config)


def _common(p, trials=False):
    p.add_argument("--config", default="two-track",
                   help="JSON config file or preset name (example1, two-track)")
    p.add_argument("--seed", type=int, default=None, help="master seed")
    p.add_argument("--out", default=None, help="output directory")
    if trials:
        p.add_argument("--trials", type=int, default=None, help="independent online trials")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="causal-transfer",
        description="Transfer from confounded expert demonstrations with causal bounds.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-expert", help="train the expert and write a demonstration dataset")
    _common(p)
    p.add_argument("--with-oracle", action="store_true",
                   help="also write the hidden contexts to a sidecar file")

    p = sub.add_parser("cluster", help="cluster the dataset and clone the basis policies")
    _common(p)

    p = sub.add_parser("bounds", help="estimate observational statistics and causal bounds")
    _common(p)

    p = sub.add_parser("run", help="run bandit-guided transfer and the baselines")
    _common(p, trials=True)

    p = sub.add_parser("pipeline", help="all stages end to end")
    _common(p, trials=True)
    p.add_argument("--with-oracle", action="store_true")

    p = sub.add_parser("example1", help="print the worked 2-arm confounded bandit")
    p.add_argument("--out", default=None)
    return parser


def _config(args):
    overrides = {"master_seed": args.seed, "out": args.out}
    if getattr(args, "trials", None) is not None:
        overrides["trials"] = args.trials
    return load_config(args.config, **overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    stage = args.command
    try:
        if stage == "example1":
            print(format_example1(cmd_example1(args.out)))
            return 0
        stage = "config"
        cfg = _config(args)
        stage = args.command
        if args.command == "gen-expert":
            _, _, summary = cmd_gen_expert(cfg, args.with_oracle)
            print(json.dumps(summary, sort_keys=True))
        elif args.command == "cluster":
            _, _, info = cmd_cluster(cfg)
            print(json.dumps(info, sort_keys=True))
        elif args.command == "bounds":
            stats, bounds, _ = cmd_bounds(cfg)
            for k in range(len(bounds)):
                print(f"arm {k}: p_hat={stats.p_mu[k]:.4f} mean_v_hat={stats.mean_v[k]:.4f} "
                      f"[{bounds.lower[k]:.4f}, {bounds.upper[k]:.4f}] ({bounds.rule})")
        elif args.command == "run":
            _, curves, _ = cmd_run(cfg)
            _print_curves(curves)
        elif args.command == "pipeline":
            res = cmd_pipeline(cfg, args.with_oracle)
            print(json.dumps(res["summary"]["oracle"], sort_keys=True))
            _print_curves(res["curves"])
        print(f"outputs in {os.path.abspath(cfg.out)}")
        return 0
    except StageError as exc:
        print(f"causal-transfer: error {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # config parsing and anything outside a stage
        print(f"causal-transfer: error [{stage}] {exc}", file=sys.stderr)
        return 1


def _print_curves(curves):
    for m in curves.methods:
        print(f"{m:>18}: terminal mean {curves.terminal_mean(m):+.4f}, "
              f"final-quartile std {curves.terminal_std(m):.4f}")


if __name__ == "__main__":
    sys.exit(main())
