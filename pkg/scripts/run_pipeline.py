#!/usr/bin/env python3
"""End-to-end desk run: generate data, train all models, compare modes.

Roughly reproduces the headline comparison table at desk scale. With
the default preset this takes a handful of minutes for training plus
whatever the evaluation episode count costs; pass --threads to spread
episodes over worker processes.

    python3 scripts/run_pipeline.py --out runs/desk --threads 4
"""

import argparse
import sys
import time

from umbrella.cli import main as cli


def stage(argv, dry=False):
    print(f"\n=== umbrella {' '.join(argv)}")
    t0 = time.perf_counter()
    if not dry:
        code = cli(argv)
        if code != 0:
            sys.exit(code)
    print(f"=== done in {time.perf_counter() - t0:.1f}s")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="desk")
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--episodes", type=int, default=None,
                    help="override evaluation episode count")
    ap.add_argument("--modes", nargs="+",
                    default=["umbrella", "umbrella-p", "mbop", "bc",
                             "noop"])
    ap.add_argument("--skip-training", action="store_true",
                    help="reuse checkpoints already under --out")
    ap.add_argument("--sweep", action="store_true",
                    help="also run the configured planner sweep")
    ap.add_argument("--bench", action="store_true",
                    help="also run the plan() runtime benchmark")
    args = ap.parse_args()

    base = ["--config", args.config, "--out", args.out,
            "--seed", str(args.seed), "--threads", str(args.threads)]
    if not args.skip_training:
        stage(["gen-data"] + base)
        stage(["train-dynamics"] + base)
        stage(["train-dynamics", "--deterministic"] + base)
        stage(["train-bc"] + base)
        stage(["train-value"] + base)
    eval_argv = ["evaluate"] + base
    for mode in args.modes:
        eval_argv += ["--mode", mode]
    if args.episodes is not None:
        eval_argv += ["--episodes", str(args.episodes)]
    stage(eval_argv)
    if args.sweep:
        stage(["sweep"] + base)
    if args.bench:
        stage(["bench"] + base)


if __name__ == "__main__":
    main()
