"""Command line entry point.

Only the standard library is imported at module level: worker and BLAS
thread environment variables must be pinned before numpy loads, so all
package imports happen inside the command handlers.

Workflow: gen-data writes dataset.jsonl under --out, the train-*
commands read it back (re-deriving the split and normalization from
the config, so every command sees the same view) and write JSON
checkpoints, and evaluate/sweep/bench consume the checkpoints. Every
artifact lands under --out.
"""

import argparse
import json
import os
import sys
from pathlib import Path

EVAL_MODE_CHOICES = ("umbrella", "umbrella-p", "mbop", "bc", "noop")

CONFIG_SECTIONS = ("scenario", "generation", "data", "dynamics", "bc",
                   "value", "planner", "evaluate", "sweep", "bench")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="desk",
                        help="JSON config file or preset name "
                             "(desk, desk-waiting, ngsim, carla)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="runs/out",
                        help="directory for all artifacts")
    common.add_argument("--threads", type=int, default=1,
                        help="episode worker processes; BLAS stays "
                             "single-threaded for reproducibility")
    parser = argparse.ArgumentParser(
        prog="umbrella",
        description="offline model-based planner for highway driving")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common],
                   help="generate the logged-driving dataset")
    td = sub.add_parser("train-dynamics", parents=[common],
                        help="train the dynamics ensemble")
    td.add_argument("--deterministic", action="store_true",
                    help="spend the whole step budget on the "
                         "deterministic phase and write "
                         "dynamics_det.ckpt (baseline model)")
    sub.add_parser("train-bc", parents=[common],
                   help="train the behavior-cloned policy ensemble")
    sub.add_parser("train-value", parents=[common],
                   help="train the truncated value ensemble")
    ev = sub.add_parser("evaluate", parents=[common],
                        help="closed-loop evaluation")
    ev.add_argument("--mode", action="append", choices=EVAL_MODE_CHOICES,
                    help="repeatable; default umbrella")
    ev.add_argument("--episodes", type=int, default=None,
                    help="paired episode count (default from config)")
    sub.add_parser("sweep", parents=[common],
                   help="one-parameter planner sweep")
    sub.add_parser("bench", parents=[common],
                   help="plan() runtime over a trajectory-count grid")
    return parser


def _pin_threads() -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def load_config(source: str) -> dict:
    from .presets import get_preset, preset_names

    if source in preset_names():
        config = get_preset(source)
    else:
        with open(source, encoding="utf-8") as fh:
            config = json.load(fh)
    unknown = sorted(set(config) - set(CONFIG_SECTIONS))
    if unknown:
        raise ValueError(f"unknown config sections: {', '.join(unknown)}")
    return config


# ── Shared pieces ───────────────────────────────────────────────────────────


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scenario(config):
    from .highway import ScenarioConfig

    return ScenarioConfig.from_mapping(config.get("scenario", {}))


def _data_section(config) -> dict:
    section = dict(config.get("data", {}))
    unknown = sorted(set(section) - {"weights", "split_fractions",
                                     "split_seed"})
    if unknown:
        raise ValueError(f"unknown data keys: {', '.join(unknown)}")
    section.setdefault("weights", (1.0, 0.1, 1.0))
    section.setdefault("split_fractions", (0.8, 0.1, 0.1))
    section.setdefault("split_seed", 0)
    section["weights"] = tuple(float(w) for w in section["weights"])
    return section


def _load_split(out: Path, config):
    from .data import load_episodes, split_episodes

    path = out / "dataset.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run gen-data first")
    episodes, weights = load_episodes(path)
    section = _data_section(config)
    if tuple(weights) != section["weights"]:
        raise ValueError(f"dataset was generated with reward weights "
                         f"{tuple(weights)}, config says "
                         f"{section['weights']}")
    splits = split_episodes(episodes, section["split_seed"],
                            tuple(section["split_fractions"]))
    return splits, section["weights"]


def _write_curves(path: Path, rows) -> None:
    if not rows:
        path.write_text("")
        return
    cols = list(rows[0])
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(format(row[c], ".10g")
                              if isinstance(row[c], float) else str(row[c])
                              for c in cols))
    path.write_text("\n".join(lines) + "\n")
    print(f"wrote {path}")


def _checkpoint_path(out: Path, name: str, mode: str) -> Path:
    path = out / name
    if not path.exists():
        raise FileNotFoundError(f"mode {mode!r} needs checkpoint {path}; "
                                f"train it first")
    return path


def _load_models(out: Path, mode: str):
    """ModelSet for a planner mode; mbop prefers the deterministic
    ensemble when present."""
    from .dynamics import DynamicsEnsemble
    from .planner import ModelSet
    from .policy_value import BCPolicyEnsemble, ValueEnsemble

    if mode == "mbop" and (out / "dynamics_det.ckpt").exists():
        dyn_path = out / "dynamics_det.ckpt"
    else:
        dyn_path = _checkpoint_path(out, "dynamics.ckpt", mode)
    dynamics = DynamicsEnsemble.load(dyn_path)
    bc = BCPolicyEnsemble.load(_checkpoint_path(out, "bc.ckpt", mode))
    value = ValueEnsemble.load(_checkpoint_path(out, "value.ckpt", mode))
    return ModelSet(dynamics, bc, value)


def _planner_config(config):
    from .planner import PlannerConfig

    return PlannerConfig.from_mapping(config.get("planner", {}))


# ── Commands ────────────────────────────────────────────────────────────────


def cmd_gen_data(args, config) -> int:
    from .data import GenerationConfig, generate_dataset, save_episodes

    out = _out_dir(args)
    scenario = _scenario(config)
    gen = GenerationConfig.from_mapping(config.get("generation", {}))
    weights = _data_section(config)["weights"]
    episodes, stats = generate_dataset(scenario, gen, args.seed)
    save_episodes(out / "dataset.jsonl", episodes, weights)
    summary = {
        "episodes": stats.kept,
        "discarded_ego_caused": stats.discarded_ego_caused,
        "kept_collisions": stats.kept_collisions,
        "reject_rate": stats.reject_rate,
        "by_family": stats.by_family,
        "seed": args.seed,
    }
    (out / "gen_stats.json").write_text(json.dumps(summary, indent=2,
                                                   sort_keys=True) + "\n")
    print(f"wrote {out / 'dataset.jsonl'} ({stats.kept} episodes, "
          f"{stats.kept_collisions} with collisions)")
    return 0


def cmd_train_dynamics(args, config) -> int:
    from dataclasses import replace

    from .dynamics import DynamicsConfig, DynamicsEnsemble, train_dynamics

    out = _out_dir(args)
    (splits, weights) = _load_split(out, config)
    train, val, _ = splits
    cfg = DynamicsConfig.from_mapping(config.get("dynamics", {}))
    name = "dynamics"
    if args.deterministic:
        cfg = replace(cfg, det_steps=cfg.det_steps + cfg.stoch_steps,
                      stoch_steps=0)
        name = "dynamics_det"
    from .data import compute_norm_stats

    norm = compute_norm_stats(train, weights)
    ensemble = DynamicsEnsemble.create(cfg, norm, args.seed)
    curves = train_dynamics(ensemble, train, val, args.seed,
                            weights=weights)
    path = out / f"{name}.ckpt"
    ensemble.save(path)
    print(f"wrote {path} (mode: {ensemble.mode})")
    _write_curves(out / f"{name}_curves.csv", curves)
    return 0


def _train_regressor(args, config, kind: str) -> int:
    from .data import compute_norm_stats

    out = _out_dir(args)
    (splits, weights) = _load_split(out, config)
    train, val, _ = splits
    norm = compute_norm_stats(train, weights)
    if kind == "bc":
        from .policy_value import BCConfig, BCPolicyEnsemble, train_bc

        cfg = BCConfig.from_mapping(config.get("bc", {}))
        ensemble = BCPolicyEnsemble.create(cfg, norm, args.seed)
        curves = train_bc(ensemble, train, val, args.seed, weights)
    else:
        from .policy_value import ValueConfig, ValueEnsemble, train_value

        cfg = ValueConfig.from_mapping(config.get("value", {}))
        ensemble = ValueEnsemble.create(cfg, norm, args.seed)
        curves = train_value(ensemble, train, val, args.seed, weights)
    path = out / f"{kind}.ckpt"
    ensemble.save(path)
    print(f"wrote {path}")
    _write_curves(out / f"{kind}_curves.csv", curves)
    return 0


def cmd_train_bc(args, config) -> int:
    return _train_regressor(args, config, "bc")


def cmd_train_value(args, config) -> int:
    return _train_regressor(args, config, "value")


def cmd_evaluate(args, config) -> int:
    from .evalkit import (canonical_mode, episode_seeds, run_suite,
                          svg_bar_chart, write_metrics_csv,
                          write_traces_jsonl)
    from .policy_value import BCPolicyEnsemble

    out = _out_dir(args)
    scenario = _scenario(config)
    planner_cfg = _planner_config(config)
    modes = [canonical_mode(m) for m in (args.mode or ["umbrella"])]
    eval_section = dict(config.get("evaluate", {}))
    unknown = sorted(set(eval_section) - {"episodes"})
    if unknown:
        raise ValueError(f"unknown evaluate keys: {', '.join(unknown)}")
    n_episodes = args.episodes if args.episodes is not None else \
        int(eval_section.get("episodes", 200))
    if n_episodes < 1:
        raise ValueError("need at least one evaluation episode")
    models = {}
    for mode in modes:
        if mode == "noop":
            models[mode] = None
        elif mode == "bc":
            models[mode] = BCPolicyEnsemble.load(
                _checkpoint_path(out, "bc.ckpt", mode))
        else:
            models[mode] = _load_models(out, mode)
    seeds = episode_seeds(args.seed, n_episodes)
    result = run_suite(modes, scenario, models, planner_cfg, seeds,
                       threads=args.threads)
    write_metrics_csv(out / "metrics.csv", result.summaries)
    print(f"wrote {out / 'metrics.csv'}")
    write_traces_jsonl(out / "traces.jsonl",
                       [t for m in modes for t in result.traces[m]])
    print(f"wrote {out / 'traces.jsonl'}")
    svg_bar_chart(out / "metrics.svg", modes,
                  [s.success_rate for s in result.summaries],
                  title=f"success rate over {n_episodes} episodes",
                  ylabel="SR")
    print(f"wrote {out / 'metrics.svg'}")
    for s in result.summaries:
        mst = "-" if s.mean_successful_time is None else \
            f"{s.mean_successful_time:.1f}s"
        print(f"{s.label}: SR {s.success_rate:.3f} "
              f"[{s.sr_ci[0]:.3f}, {s.sr_ci[1]:.3f}]  "
              f"MD {s.mean_distance:.1f}m  MST {mst}")
    return 0


def cmd_sweep(args, config) -> int:
    from .evalkit import (SweepSpec, run_sweep, svg_line_chart,
                          write_sweep_csv)

    out = _out_dir(args)
    scenario = _scenario(config)
    base = _planner_config(config)
    section = dict(config.get("sweep", {}))
    unknown = sorted(set(section) - {"parameter", "values",
                                     "episodes_per_point"})
    if unknown:
        raise ValueError(f"unknown sweep keys: {', '.join(unknown)}")
    if "parameter" not in section or "values" not in section:
        raise ValueError("sweep config needs 'parameter' and 'values'")
    spec = SweepSpec(base, section["parameter"],
                     tuple(section["values"]),
                     int(section.get("episodes_per_point", 20)),
                     seed=args.seed)
    models = _load_models(out, base.mode)
    rows = run_sweep(spec, scenario, models, threads=args.threads)
    write_sweep_csv(out / "sweep.csv", rows)
    print(f"wrote {out / 'sweep.csv'}")
    xs = [float(r["value"]) for r in rows]
    sr = [r["summary"].success_rate if r["summary"] else None
          for r in rows]
    md = [r["summary"].mean_distance if r["summary"] else None
          for r in rows]
    svg_line_chart(out / "sweep.svg", xs, [("SR", sr), ("MD", md)],
                   title=f"sweep over {spec.parameter}",
                   xlabel=spec.parameter)
    print(f"wrote {out / 'sweep.svg'}")
    return 0


def cmd_bench(args, config) -> int:
    from .evalkit import runtime_benchmark, svg_line_chart, write_bench_csv

    out = _out_dir(args)
    base = _planner_config(config)
    section = dict(config.get("bench", {}))
    unknown = sorted(set(section) - {"n_grid", "repeats"})
    if unknown:
        raise ValueError(f"unknown bench keys: {', '.join(unknown)}")
    n_grid = [int(n) for n in section.get("n_grid",
                                          (10, 50, 100, 200, 300, 500))]
    repeats = int(section.get("repeats", 20))
    models = _load_models(out, base.mode)
    rows = runtime_benchmark(models, base, n_grid, repeats=repeats,
                             seed=args.seed)
    write_bench_csv(out / "bench.csv", rows)
    print(f"wrote {out / 'bench.csv'}")
    svg_line_chart(out / "bench.svg", [r["n_trajectories"] for r in rows],
                   [("median plan() seconds",
                     [r["median_s"] for r in rows])],
                   title=f"plan() runtime, K={rows[0]['ensemble_size']}, "
                         f"H={rows[0]['horizon']}",
                   xlabel="trajectories N")
    print(f"wrote {out / 'bench.svg'}")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-dynamics": cmd_train_dynamics,
    "train-bc": cmd_train_bc,
    "train-value": cmd_train_value,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _pin_threads()
    try:
        config = load_config(args.config)
        return _COMMANDS[args.command](args, config)
    except Exception as err:  # single machine-readable error line
        print(json.dumps({"command": args.command,
                          "error": str(err),
                          "type": type(err).__name__}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
