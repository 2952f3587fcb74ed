#!/usr/bin/env python3
"""Waiting-fixture study: does the controller re-accelerate after a
stop, or inherit the cloned policy's habit of standing still forever?

Trains on the desk-waiting preset (long cue-free stand-stills), then
runs the 1-step BC baseline and the planner from a standing start on
paired seeds and reports stop-event outcomes for each.

    python3 scripts/inertia_study.py --out runs/waiting --threads 4
"""

import argparse
import sys

from umbrella.cli import main as cli


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/waiting")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--episodes", type=int, default=40)
    ap.add_argument("--eval-horizon", type=int, default=160,
                    help="episode length for the standing-start test")
    ap.add_argument("--skip-training", action="store_true")
    args = ap.parse_args()

    base = ["--config", "desk-waiting", "--out", args.out,
            "--seed", str(args.seed), "--threads", str(args.threads)]
    if not args.skip_training:
        for argv in (["gen-data"], ["train-dynamics"], ["train-bc"],
                     ["train-value"]):
            code = cli(argv + base)
            if code != 0:
                sys.exit(code)

    # numpy-facing imports after the CLI has pinned BLAS threads
    from dataclasses import replace

    from umbrella.cli import _load_models
    from umbrella.evalkit import episode_seeds, run_suite, stall_summary
    from umbrella.highway import ScenarioConfig
    from umbrella.planner import PlannerConfig
    from umbrella.presets import get_preset
    from pathlib import Path

    preset = get_preset("desk-waiting")
    scenario = replace(ScenarioConfig.from_mapping(preset["scenario"]),
                       horizon_steps=args.eval_horizon)
    planner_cfg = PlannerConfig.from_mapping(preset["planner"])
    models = _load_models(Path(args.out), "umbrella")
    seeds = episode_seeds(args.seed + 10_000, args.episodes)
    result = run_suite(["bc", "umbrella"], scenario, models, planner_cfg,
                       seeds, threads=args.threads)
    print(f"\nstanding-start outcomes over {args.episodes} paired "
          f"episodes (horizon {args.eval_horizon} steps):")
    for mode in ("bc", "umbrella"):
        s = stall_summary(result.traces[mode])
        print(f"  {mode:9s} stop events {s['events']:3d}  "
              f"stalled {s['stall_rate']:.0%}  "
              f"resumed {s['resume_rate']:.0%}")
    for summary in result.summaries:
        print(f"  {summary.label:9s} SR {summary.success_rate:.2f}  "
              f"MD {summary.mean_distance:.1f} m")


if __name__ == "__main__":
    main()
