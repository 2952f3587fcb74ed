"""Experiment harness: closed-loop metrics, baselines, sweeps, reports.

Metrics are pure functions of episode traces, so anything written to
traces.jsonl can be re-aggregated later and gives the same summary.
All report files (CSV, JSONL, SVG) are plain text generated with fixed
float formatting, which makes runs diffable byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import multiprocessing
import time
import warnings
from dataclasses import dataclass, fields, replace

import numpy as np

from .highway import ScenarioConfig, env_step, observe
from .planner import (ControlHistory, EpisodeTrace, PlannerConfig,
                      episode_reset, episode_success, mpc_episode, plan)
from .policy_value import BCPolicyEnsemble

EVAL_MODES = ("umbrella", "umbrella_p", "mbop", "bc", "noop")

BOOTSTRAP_RESAMPLES = 10_000


def canonical_mode(mode: str) -> str:
    mode = mode.replace("-", "_")
    if mode not in EVAL_MODES:
        raise ValueError(f"mode must be one of {EVAL_MODES}, got {mode!r}")
    return mode


# ── Per-trace statistics ────────────────────────────────────────────────────


def episode_distance(trace: EpisodeTrace) -> float:
    """Longitudinal displacement; the ego always starts at x = 0."""
    return float(trace.ego_x[-1]) if trace.length else 0.0


def episode_time(trace: EpisodeTrace) -> float:
    return trace.length * trace.dt


def episode_jerk(trace: EpisodeTrace) -> float:
    """Mean L2 norm of consecutive action differences."""
    if trace.length < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(trace.actions, axis=0),
                                axis=1).mean())


@dataclass
class StopEvent:
    start: int
    length: int
    stalled: bool   # stayed below threshold long enough to count
    resumed: bool   # speed recovered before the trace ended


def stop_events(speeds, v_stop: float = 0.1,
                stall_len: int = 30) -> list:
    """Contiguous runs of near-zero speed with their outcomes.

    A run that reaches stall_len is a stall even if the ego eventually
    moves again; a run cut off by the end of the trace before stalling
    counts as neither stalled nor resumed.
    """
    v = np.asarray(speeds, dtype=float)
    events = []
    t, T = 0, len(v)
    while t < T:
        if v[t] < v_stop:
            start = t
            while t < T and v[t] < v_stop:
                t += 1
            run = t - start
            events.append(StopEvent(start=start, length=run,
                                    stalled=run >= stall_len,
                                    resumed=t < T and run < stall_len))
        else:
            t += 1
    return events


def stall_summary(traces, v_stop: float = 0.1,
                  stall_len: int = 30) -> dict:
    """Stop-event outcomes pooled over a trace set."""
    events = [e for t in traces
              for e in stop_events(t.ego_v, v_stop, stall_len)]
    n = len(events)
    stalled = sum(e.stalled for e in events)
    resumed = sum(e.resumed for e in events)
    return {"events": n, "stalled": stalled, "resumed": resumed,
            "stall_rate": stalled / n if n else 0.0,
            "resume_rate": resumed / n if n else 0.0}


# ── Aggregate metrics ───────────────────────────────────────────────────────


@dataclass
class MetricsSummary:
    label: str
    episodes: int
    success_rate: float
    sr_ci: tuple
    mean_distance: float
    md_ci: tuple
    mean_successful_time: float | None   # None when nothing succeeded
    mst_ci: tuple | None
    mean_reward: float
    r_prog: float
    r_lane: float
    r_coll: float
    mean_jerk: float

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 1.0:
            raise ValueError("success rate outside [0, 1]")
        for ci in (self.sr_ci, self.md_ci, self.mst_ci):
            if ci is not None and ci[0] > ci[1]:
                raise ValueError("confidence bounds out of order")


def bootstrap_ci(values, n_resamples: int = BOOTSTRAP_RESAMPLES,
                 seed: int = 0, alpha: float = 0.05) -> tuple:
    """Seeded percentile bootstrap CI for the mean."""
    values = np.asarray(values, dtype=float)
    if len(values) == 0:
        raise ValueError("bootstrap over an empty sample")
    if len(values) == 1:
        return (float(values[0]), float(values[0]))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 404]))
    idx = rng.integers(0, len(values), size=(n_resamples, len(values)))
    means = values[idx].mean(axis=1)
    lo, hi = np.quantile(means, [alpha / 2, 1.0 - alpha / 2])
    return (float(lo), float(hi))


def _component_means(trace: EpisodeTrace) -> np.ndarray:
    if trace.length == 0:
        return np.zeros(3)
    return trace.rew_components.mean(axis=0)


def compute_metrics(traces, label: str | None = None,
                    n_resamples: int = BOOTSTRAP_RESAMPLES,
                    seed: int = 0) -> MetricsSummary:
    """Aggregate a trace set; reward components are per-step means
    averaged over episodes."""
    traces = list(traces)
    if not traces:
        raise ValueError("compute_metrics needs at least one trace")
    success = np.array([t.success for t in traces], dtype=float)
    dist = np.array([episode_distance(t) for t in traces])
    comp = np.stack([_component_means(t) for t in traces])
    times = np.array([episode_time(t) for t, s in zip(traces, success)
                      if s])
    mst, mst_ci = None, None
    if len(times):
        mst = float(times.mean())
        mst_ci = bootstrap_ci(times, n_resamples, seed)
    return MetricsSummary(
        label=label if label is not None else traces[0].label,
        episodes=len(traces),
        success_rate=float(success.mean()),
        sr_ci=bootstrap_ci(success, n_resamples, seed),
        mean_distance=float(dist.mean()),
        md_ci=bootstrap_ci(dist, n_resamples, seed),
        mean_successful_time=mst,
        mst_ci=mst_ci,
        mean_reward=float(comp.sum(axis=1).mean()),
        r_prog=float(comp[:, 0].mean()),
        r_lane=float(comp[:, 1].mean()),
        r_coll=float(comp[:, 2].mean()),
        mean_jerk=float(np.mean([episode_jerk(t) for t in traces])),
    )


# ── Baseline runners ────────────────────────────────────────────────────────


def _policy_episode(scenario: ScenarioConfig, seed: int, label: str,
                    history_len: int, policy_fn) -> EpisodeTrace:
    state, step_rng = episode_reset(scenario, seed)
    history = ControlHistory.initial(observe(state), history_len)
    acts, rews, xs, ys, vs = [], [], [], [], []
    while not state.done:
        action = np.asarray(policy_fn(history), dtype=float)
        state = env_step(state, action, step_rng)
        history.push(action, observe(state))
        acts.append(action)
        rews.append(state.reward_components)
        xs.append(state.ego.x)
        ys.append(state.ego.y)
        vs.append(state.ego.v)
    return EpisodeTrace(
        seed=seed, label=label, dt=scenario.dt,
        actions=np.array(acts).reshape(-1, 2),
        rew_components=np.array(rews).reshape(-1, 3),
        ego_x=np.array(xs), ego_y=np.array(ys), ego_v=np.array(vs),
        collision=state.collision, goal_reached=state.goal_remaining <= 0.0,
        success=episode_success(state),
    )


def noop_episode(scenario: ScenarioConfig, seed: int,
                 label: str = "noop") -> EpisodeTrace:
    return _policy_episode(scenario, seed, label, history_len=1,
                           policy_fn=lambda h: np.zeros(2))


def bc_episode(scenario: ScenarioConfig, bc: BCPolicyEnsemble, seed: int,
               label: str = "bc") -> EpisodeTrace:
    """One-step behavior-cloning baseline: ensemble-mean action."""
    norm = bc.norm

    def policy(history):
        a = bc.act_mean(norm.norm_obs(history.obs),
                        norm.norm_act(history.act))
        return norm.denorm_act(a)

    return _policy_episode(scenario, seed, label, bc.cfg.history_len,
                           policy)


def run_episode(mode: str, scenario: ScenarioConfig, models,
                planner_cfg: PlannerConfig, seed: int) -> EpisodeTrace:
    """Dispatch one episode for any evaluation mode."""
    mode = canonical_mode(mode)
    if mode == "noop":
        return noop_episode(scenario, seed)
    if models is None:
        raise ValueError(f"mode {mode!r} needs trained models")
    if mode == "bc":
        # accepts a full ModelSet or just the BC ensemble
        bc = models.bc if hasattr(models, "bc") else models
        return bc_episode(scenario, bc, seed)
    cfg = replace(planner_cfg, mode=mode)
    return mpc_episode(scenario, models, cfg, seed, label=mode)


def initial_state_digest(scenario: ScenarioConfig, seed: int) -> str:
    """Hash of the episode's initial EnvState; equal across modes."""
    state, _ = episode_reset(scenario, seed)
    cars = [(a.x, a.y, a.v, a.mode, a.v_des)
            for a in [state.ego] + state.others]
    blob = json.dumps(cars, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


# ── Suites ──────────────────────────────────────────────────────────────────


@dataclass
class SuiteResult:
    summaries: list       # one MetricsSummary per mode, input order
    traces: dict          # mode -> list of EpisodeTrace, seed order


_JOB_STATE: dict = {}


def _suite_init(scenario, models_by_mode, planner_cfg):
    _JOB_STATE["scenario"] = scenario
    _JOB_STATE["models"] = models_by_mode
    _JOB_STATE["cfg"] = planner_cfg


def _suite_job(job):
    mode, seed = job
    return run_episode(mode, _JOB_STATE["scenario"],
                       _JOB_STATE["models"][mode], _JOB_STATE["cfg"], seed)


def _resolve_models(models, modes) -> dict:
    if isinstance(models, dict):
        missing = [m for m in modes if m not in models and m != "noop"]
        if missing:
            raise ValueError(f"no models supplied for mode "
                             f"{missing[0]!r}")
        return {m: models.get(m) for m in modes}
    return {m: models for m in modes}


def run_suite(modes, scenario: ScenarioConfig, models,
              planner_cfg: PlannerConfig, seeds, threads: int = 1,
              n_resamples: int = BOOTSTRAP_RESAMPLES,
              bootstrap_seed: int = 0) -> SuiteResult:
    """Paired-seed evaluation: every mode runs the same episode seeds.

    models may be a single ModelSet shared by all modes or a dict keyed
    by mode (e.g. a separately trained deterministic ensemble for mbop).
    Episodes are independent, so they may run across worker processes;
    results are aggregated in (mode, seed) order either way.
    """
    modes = [canonical_mode(m) for m in modes]
    if len(set(modes)) != len(modes):
        raise ValueError("duplicate modes in suite")
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("suite needs at least one episode seed")
    models_by_mode = _resolve_models(models, modes)
    jobs = [(mode, seed) for mode in modes for seed in seeds]
    if threads > 1:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(threads, initializer=_suite_init,
                      initargs=(scenario, models_by_mode,
                                planner_cfg)) as pool:
            results = pool.map(_suite_job, jobs, chunksize=1)
    else:
        _suite_init(scenario, models_by_mode, planner_cfg)
        results = [_suite_job(j) for j in jobs]
    traces = {mode: [] for mode in modes}
    for (mode, _), trace in zip(jobs, results):
        traces[mode].append(trace)
    summaries = [compute_metrics(traces[m], label=m,
                                 n_resamples=n_resamples,
                                 seed=bootstrap_seed) for m in modes]
    return SuiteResult(summaries, traces)


# ── Sweeps ──────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class SweepSpec:
    base: PlannerConfig
    parameter: str
    values: tuple
    episodes_per_point: int
    seed: int = 0

    def __post_init__(self):
        names = {f.name for f in fields(PlannerConfig)}
        if self.parameter not in names:
            raise ValueError(f"unknown planner parameter "
                             f"{self.parameter!r}")
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if self.episodes_per_point < 1:
            raise ValueError("episodes_per_point must be >= 1")
        object.__setattr__(self, "values", tuple(self.values))


def run_sweep(spec: SweepSpec, scenario: ScenarioConfig, models,
              threads: int = 1,
              n_resamples: int = BOOTSTRAP_RESAMPLES) -> list:
    """One suite point per parameter value, paired episode seeds.

    Failures at a point are recorded in that row's "error" field and
    the sweep continues.
    """
    seeds = episode_seeds(spec.seed, spec.episodes_per_point)
    rows = []
    for value in spec.values:
        row = {"parameter": spec.parameter, "value": value,
               "summary": None, "error": ""}
        try:
            cfg = replace(spec.base, **{spec.parameter: value})
            result = run_suite([cfg.mode], scenario, models, cfg, seeds,
                               threads=threads, n_resamples=n_resamples)
            row["summary"] = replace(result.summaries[0],
                                     label=f"{spec.parameter}={value}")
        except Exception as err:
            warnings.warn(f"sweep point {spec.parameter}={value} failed: "
                          f"{err}")
            row["error"] = str(err)
        rows.append(row)
    return rows


def episode_seeds(base_seed: int, count: int) -> list:
    """Consecutive ints; stream independence comes from SeedSequence
    hashing inside episode_reset."""
    return [int(base_seed) + i for i in range(count)]


# ── Runtime benchmark ───────────────────────────────────────────────────────


def runtime_benchmark(models, planner_cfg: PlannerConfig, n_grid,
                      repeats: int = 20, warmup: int = 2,
                      seed: int = 0) -> list:
    """Median wall-clock per plan() call over an N grid, K and H fixed.

    models may be a dict {K: ModelSet} to add an ensemble-size axis.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    by_k = models if isinstance(models, dict) else {models.size: models}
    rows = []
    for K in sorted(by_k):
        mset = by_k[K]
        d_obs = mset.dynamics.cfg.obs_dim
        history = ControlHistory.initial(np.zeros(d_obs),
                                         mset.history_len)
        for N in n_grid:
            cfg = replace(planner_cfg, ensemble_size=K,
                          n_trajectories=int(N),
                          history_len=mset.history_len)
            times = []
            for i in range(warmup + repeats):
                t0 = time.perf_counter()
                plan(history, None, mset, cfg, seed=seed + i)
                elapsed = time.perf_counter() - t0
                if i >= warmup:
                    times.append(elapsed)
            times = np.array(times)
            rows.append({
                "n_trajectories": int(N), "ensemble_size": K,
                "horizon": cfg.horizon, "repeats": repeats,
                "median_s": float(np.median(times)),
                "mean_s": float(times.mean()),
                "min_s": float(times.min()),
                "max_s": float(times.max()),
            })
    return rows


# ── Report writers ──────────────────────────────────────────────────────────


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float):
        return format(x, ".10g")
    return str(x)


METRICS_COLUMNS = (
    "label", "episodes", "success_rate", "sr_lo", "sr_hi",
    "mean_distance", "md_lo", "md_hi", "mean_successful_time", "mst_lo",
    "mst_hi", "mean_reward", "r_prog", "r_lane", "r_coll", "mean_jerk",
)


def _summary_row(s: MetricsSummary) -> list:
    mst_lo, mst_hi = s.mst_ci if s.mst_ci is not None else (None, None)
    return [s.label, s.episodes, s.success_rate, s.sr_ci[0], s.sr_ci[1],
            s.mean_distance, s.md_ci[0], s.md_ci[1],
            s.mean_successful_time, mst_lo, mst_hi, s.mean_reward,
            s.r_prog, s.r_lane, s.r_coll, s.mean_jerk]


def write_metrics_csv(path, summaries) -> None:
    lines = [",".join(METRICS_COLUMNS)]
    for s in summaries:
        lines.append(",".join(_fmt(v) for v in _summary_row(s)))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_sweep_csv(path, rows) -> None:
    header = ("parameter", "value") + METRICS_COLUMNS[1:] + ("error",)
    lines = [",".join(header)]
    for row in rows:
        if row["summary"] is not None:
            cells = _summary_row(row["summary"])[1:]
        else:
            cells = [None] * (len(METRICS_COLUMNS) - 1)
        cells = [row["parameter"], row["value"]] + cells \
            + [row["error"].replace(",", ";")]
        lines.append(",".join(_fmt(v) for v in cells))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_bench_csv(path, rows) -> None:
    cols = ("n_trajectories", "ensemble_size", "horizon", "repeats",
            "median_s", "mean_s", "min_s", "max_s")
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in cols))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def trace_to_dict(trace: EpisodeTrace) -> dict:
    return {
        "seed": trace.seed, "label": trace.label, "dt": trace.dt,
        "actions": trace.actions.tolist(),
        "rew_components": trace.rew_components.tolist(),
        "ego_x": trace.ego_x.tolist(), "ego_y": trace.ego_y.tolist(),
        "ego_v": trace.ego_v.tolist(), "collision": trace.collision,
        "goal_reached": trace.goal_reached, "success": trace.success,
    }


def trace_from_dict(d: dict) -> EpisodeTrace:
    return EpisodeTrace(
        seed=d["seed"], label=d["label"], dt=d["dt"],
        actions=np.array(d["actions"]).reshape(-1, 2),
        rew_components=np.array(d["rew_components"]).reshape(-1, 3),
        ego_x=np.array(d["ego_x"]), ego_y=np.array(d["ego_y"]),
        ego_v=np.array(d["ego_v"]), collision=d["collision"],
        goal_reached=d["goal_reached"], success=d["success"],
    )


def write_traces_jsonl(path, traces) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for trace in traces:
            fh.write(json.dumps(trace_to_dict(trace), sort_keys=True,
                                separators=(",", ":")) + "\n")


def read_traces_jsonl(path) -> list:
    traces = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                traces.append(trace_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as err:
                raise ValueError(f"line {i}: malformed trace "
                                 f"({err})") from err
    return traces


# ── Hand-rolled SVG charts (no rendering dependency) ────────────────────────

_SVG_W, _SVG_H, _MARGIN = 640, 220, 56


def _scale(vals, lo, hi, out_lo, out_hi):
    span = hi - lo if hi > lo else 1.0
    return [out_lo + (v - lo) / span * (out_hi - out_lo) for v in vals]


def _panel(x, ys, name, y_off, xlabel="") -> str:
    pts = [(xi, yi) for xi, yi in zip(x, ys) if yi is not None]
    parts = [f'<g transform="translate(0,{y_off})">']
    parts.append(f'<rect x="{_MARGIN}" y="10" '
                 f'width="{_SVG_W - 2 * _MARGIN}" '
                 f'height="{_SVG_H - 60}" fill="none" stroke="#999"/>')
    parts.append(f'<text x="{_MARGIN}" y="{_SVG_H - 20}" '
                 f'font-size="12">{xlabel}</text>')
    parts.append(f'<text x="8" y="24" font-size="12">{name}</text>')
    if pts:
        px = _scale([p[0] for p in pts], min(x), max(x), _MARGIN,
                    _SVG_W - _MARGIN)
        vals = [p[1] for p in pts]
        py = _scale(vals, min(vals), max(vals), _SVG_H - 50, 10)
        coords = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
        parts.append(f'<polyline points="{coords}" fill="none" '
                     f'stroke="#2266cc" stroke-width="2"/>')
        for a, b in zip(px, py):
            parts.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="3" '
                         f'fill="#2266cc"/>')
        parts.append(f'<text x="{_MARGIN}" y="{_SVG_H - 44}" '
                     f'font-size="10">min {min(vals):.4g}</text>')
        parts.append(f'<text x="{_MARGIN}" y="22" font-size="10">'
                     f'max {max(vals):.4g}</text>')
    parts.append("</g>")
    return "\n".join(parts)


def svg_line_chart(path, x, panels, title="", xlabel="") -> None:
    """Stacked line panels sharing an x axis; None values leave gaps."""
    x = [float(v) for v in x]
    height = _SVG_H * len(panels) + 30
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" '
             f'height="{height}" viewBox="0 0 {_SVG_W} {height}">',
             f'<text x="{_MARGIN}" y="18" font-size="14">{title}</text>']
    for i, (name, ys) in enumerate(panels):
        parts.append(_panel(x, ys, name, 24 + i * _SVG_H,
                            xlabel if i == len(panels) - 1 else ""))
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")


def svg_bar_chart(path, labels, values, title="", ylabel="") -> None:
    n = max(len(labels), 1)
    top = max([v for v in values if v is not None] + [1e-9])
    width = (_SVG_W - 2 * _MARGIN) / n
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" '
             f'height="{_SVG_H + 40}" '
             f'viewBox="0 0 {_SVG_W} {_SVG_H + 40}">',
             f'<text x="{_MARGIN}" y="18" font-size="14">{title}</text>',
             f'<text x="8" y="40" font-size="12">{ylabel}</text>']
    floor = _SVG_H + 10
    for i, (label, value) in enumerate(zip(labels, values)):
        if value is None:
            continue
        h = 0.0 if top <= 0 else max(0.0, value / top) * (_SVG_H - 60)
        x0 = _MARGIN + i * width
        parts.append(f'<rect x="{x0 + 6:.2f}" y="{floor - h:.2f}" '
                     f'width="{width - 12:.2f}" height="{h:.2f}" '
                     f'fill="#2266cc"/>')
        parts.append(f'<text x="{x0 + 6:.2f}" y="{floor + 16:.2f}" '
                     f'font-size="12">{label}</text>')
        parts.append(f'<text x="{x0 + 6:.2f}" y="{floor - h - 4:.2f}" '
                     f'font-size="10">{value:.3g}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")
