"""Logged-driving datasets: generation, labeling, windows, serialization.

Demo episodes come from three scripted behavior families (a gap-keeping
PID tracker, the same tracker with injected 5-step control-noise
bursts, and a lane-wandering stochastic driver). Episodes that end in
an ego-caused collision are discarded and regenerated; collisions
caused by others (a cutting-in or rear-ending agent) are kept and
retro-labeled with a ramped collision penalty over the ten steps
leading into the impact, which is what gives reward and value models a
usable danger signal around pre-collision states.

The dataset format is JSON Lines: one header line, then one episode
per line. All floats survive a load/save round trip byte-identically.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, fields

import numpy as np

from .highway import (
    ACT_DIM,
    OBS_DIM,
    EnvState,
    ScenarioConfig,
    collision_check,
    env_reset,
    env_step,
    observe,
)

DATASET_VERSION = 1
POLICY_TAGS = ("pid_tracker", "pid_with_noise", "stochastic_wanderer")

# Retro collision labels: -2 at the collision step, decaying by 0.2 per
# step backwards, ten labeled steps total.
RETRO_STEPS = 10
RETRO_SLOPE = 0.2
COLLISION_PENALTY = -2.0


# ── Records ─────────────────────────────────────────────────────────────────


@dataclass
class EpisodeRecord:
    """One logged episode; all sequences share the same length."""

    seed: int
    policy_tag: str
    obs: np.ndarray            # (T, OBS_DIM), state before each action
    act: np.ndarray            # (T, ACT_DIM), executed (clamped) actions
    rew_components: np.ndarray  # (T, 3): progress, lane, collision
    done: np.ndarray           # (T,) bool
    t_coll: int | None = None

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64)
        self.act = np.asarray(self.act, dtype=np.float64)
        self.rew_components = np.asarray(self.rew_components, dtype=np.float64)
        self.done = np.asarray(self.done, dtype=bool)
        T = len(self.obs)
        if not (len(self.act) == len(self.rew_components) == len(self.done) == T):
            raise ValueError("episode sequences have mismatched lengths")
        if self.t_coll is not None and not 0 <= self.t_coll < T:
            raise ValueError("t_coll outside the episode")

    @property
    def length(self) -> int:
        return len(self.obs)

    def totals(self, weights) -> np.ndarray:
        w = np.asarray(weights, dtype=np.float64)
        return self.rew_components @ w

    def copy(self) -> "EpisodeRecord":
        return EpisodeRecord(self.seed, self.policy_tag, self.obs.copy(),
                             self.act.copy(), self.rew_components.copy(),
                             self.done.copy(), self.t_coll)


def retro_label_collision(episode: EpisodeRecord) -> EpisodeRecord:
    """Write the ramped collision penalty into the ten pre-impact steps.

    No collision means no change. The collision step itself keeps the
    -2 written at generation time; earlier steps t get
    -2 + 0.2 * (t_coll - t), so the labels run -0.2 .. -2.0.
    """
    out = episode.copy()
    if out.t_coll is None:
        return out
    tc = out.t_coll
    for t in range(max(0, tc - (RETRO_STEPS - 1)), tc + 1):
        out.rew_components[t, 2] = COLLISION_PENALTY + RETRO_SLOPE * (tc - t)
    return out


# ── Behavior policies ───────────────────────────────────────────────────────


@dataclass(frozen=True)
class GenerationConfig:
    """Knobs of the demo-data generator. Defaults give the standard mix."""

    episodes: int = 1200
    policy_mix: tuple = (1 / 3, 1 / 3, 1 / 3)  # POLICY_TAGS order
    max_attempts: int = 60
    max_reject_rate: float = 0.95

    # Episodes hold a zero action for a random warmup drawn from this
    # range (inclusive-exclusive); used by waiting-heavy fixtures.
    wait_steps_range: tuple = (0, 0)

    # PID tracker.
    base_target_speed: float = 9.5
    style_range: tuple = (0.8, 1.2)
    accel_gain: float = 0.25
    brake_gain: float = 0.08
    lat_gain: float = 0.3
    gap_base: float = 5.0
    gap_headway: float = 1.2

    # Noise bursts (pid_with_noise).
    burst_prob: float = 0.06
    burst_len: int = 5
    burst_dv: float = 0.4
    burst_dy: float = 0.15

    # Wanderer.
    wander_speed_range: tuple = (4.0, 12.0)
    wander_retarget_steps: int = 40
    wander_lane_prob: float = 0.02
    wander_noise: float = 0.08

    def __post_init__(self):
        mix = tuple(float(m) for m in self.policy_mix)
        if len(mix) != len(POLICY_TAGS) or any(m < 0 for m in mix) \
                or abs(sum(mix) - 1.0) > 1e-9:
            raise ValueError("policy_mix must be 3 non-negative weights "
                             "summing to 1")
        object.__setattr__(self, "policy_mix", mix)
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "GenerationConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ValueError(f"unknown generation keys: {', '.join(unknown)}")
        return cls(**mapping)


def _nearest_lead(state: EnvState):
    cfg = state.config
    lane = cfg.nearest_lane(state.ego.y)
    best = None
    for o in state.others:
        if cfg.nearest_lane(o.y) != lane or o.x <= state.ego.x:
            continue
        if best is None or o.x < best.x:
            best = o
    return best


class PidTracker:
    """Track a styled target speed, brake on small same-lane gaps."""

    def __init__(self, cfg: ScenarioConfig, gen: GenerationConfig, rng):
        style = float(rng.uniform(*gen.style_range))
        self.v_target = min(style * gen.base_target_speed, cfg.v_limit)
        self.margin = 2.0 - style  # cautious styles keep larger gaps
        self.gen = gen
        self.cfg = cfg

    def act(self, state: EnvState) -> np.ndarray:
        gen, cfg = self.gen, self.cfg
        ego = state.ego
        dv = gen.accel_gain * (self.v_target - ego.v)
        lead = _nearest_lead(state)
        if lead is not None:
            gap = lead.x - ego.x - ego.length
            desired = (gen.gap_base + gen.gap_headway * ego.v) * self.margin
            if gap < desired:
                dv = min(dv, gen.brake_gain * (gap - desired))
            if gap < 2.0:
                dv = cfg.dv_bounds[0]
        center = cfg.lane_center(cfg.nearest_lane(ego.y))
        dy = gen.lat_gain * (center - ego.y)
        return np.array([dv, dy])


class NoisyTracker(PidTracker):
    """PID tracker plus held 5-step random control offsets."""

    def __init__(self, cfg, gen, rng):
        super().__init__(cfg, gen, rng)
        self.rng = rng
        self.burst_left = 0
        self.offset = np.zeros(ACT_DIM)

    def act(self, state: EnvState) -> np.ndarray:
        gen = self.gen
        if self.burst_left == 0 and self.rng.random() < gen.burst_prob:
            self.burst_left = gen.burst_len
            self.offset = np.array([
                self.rng.uniform(-gen.burst_dv, gen.burst_dv),
                self.rng.uniform(-gen.burst_dy, gen.burst_dy),
            ])
        a = super().act(state)
        if self.burst_left > 0:
            self.burst_left -= 1
            a = a + self.offset
        return a


class Wanderer:
    """Random speed targets and occasional random lane changes."""

    def __init__(self, cfg: ScenarioConfig, gen: GenerationConfig, rng):
        self.cfg = cfg
        self.gen = gen
        self.rng = rng
        self.v_target = float(rng.uniform(*gen.wander_speed_range))
        self.lane = cfg.ego_lane
        self.countdown = gen.wander_retarget_steps

    def act(self, state: EnvState) -> np.ndarray:
        gen, cfg = self.gen, self.cfg
        self.countdown -= 1
        if self.countdown <= 0:
            self.v_target = float(self.rng.uniform(*gen.wander_speed_range))
            self.countdown = gen.wander_retarget_steps
        if self.rng.random() < gen.wander_lane_prob:
            self.lane = int(self.rng.integers(cfg.lane_count))
        dv = 0.2 * (self.v_target - state.ego.v) \
            + self.rng.normal(0.0, gen.wander_noise)
        dy = 0.3 * (cfg.lane_center(self.lane) - state.ego.y)
        return np.array([dv, dy])


_POLICY_CLASSES = {
    "pid_tracker": PidTracker,
    "pid_with_noise": NoisyTracker,
    "stochastic_wanderer": Wanderer,
}


# ── Generation ──────────────────────────────────────────────────────────────


@dataclass
class GenerationStats:
    kept: int = 0
    discarded_ego_caused: int = 0
    kept_collisions: int = 0
    by_family: dict = None

    @property
    def reject_rate(self) -> float:
        total = self.kept + self.discarded_ego_caused
        return self.discarded_ego_caused / total if total else 0.0


def _ego_caused(state: EnvState) -> bool:
    """Classify a collision. The ego is at fault unless the collider was
    mid cut-in (merged into the ego) or struck the ego from behind."""
    for other in state.others:
        if collision_check(state.ego, other):
            if other.mode == "cut_in" or other.x < state.ego.x:
                return False
            return True
    return True


def run_demo_episode(cfg: ScenarioConfig, gen: GenerationConfig, tag: str,
                     seed_seq: np.random.SeedSequence) -> EpisodeRecord:
    """Roll one scripted-policy episode; collisions are retro-labeled."""
    if tag not in _POLICY_CLASSES:
        raise ValueError(f"unknown policy tag {tag!r}")
    spawn_ss, policy_ss, env_ss, wait_ss = seed_seq.spawn(4)
    state = env_reset(cfg, np.random.default_rng(spawn_ss))
    policy = _POLICY_CLASSES[tag](cfg, gen, np.random.default_rng(policy_ss))
    env_rng = np.random.default_rng(env_ss)
    lo, hi = gen.wait_steps_range
    t_wait = int(np.random.default_rng(wait_ss).integers(lo, hi)) if hi > lo \
        else lo
    obs, act, rew, done = [], [], [], []
    while not state.done:
        obs.append(observe(state))
        a = np.zeros(ACT_DIM) if state.t < t_wait else policy.act(state)
        a = np.clip(a, (cfg.dv_bounds[0], cfg.dy_bounds[0]),
                    (cfg.dv_bounds[1], cfg.dy_bounds[1]))
        state = env_step(state, a, env_rng)
        act.append(a)
        rew.append(state.reward_components)
        done.append(state.done)
    t_coll = state.t - 1 if state.collision else None
    record = retro_label_collision(EpisodeRecord(
        seed=int(seed_seq.generate_state(1, np.uint64)[0]),
        policy_tag=tag,
        obs=np.array(obs), act=np.array(act), rew_components=np.array(rew),
        done=np.array(done), t_coll=t_coll,
    ))
    record._final_state = state  # cause classification peeks at modes
    return record


def family_counts(gen: GenerationConfig) -> list:
    counts = [int(np.floor(m * gen.episodes)) for m in gen.policy_mix]
    i = 0
    while sum(counts) < gen.episodes:
        counts[i % len(counts)] += 1
        i += 1
    return counts


def generate_dataset(cfg: ScenarioConfig, gen: GenerationConfig, seed: int):
    """Generate, filter, and label episodes.

    Returns (episodes, GenerationStats). Episodes ending in an
    ego-caused collision are regenerated under a fresh attempt seed; a
    reject rate above gen.max_reject_rate is a configuration error.
    """
    episodes = []
    stats = GenerationStats(by_family={t: 0 for t in POLICY_TAGS})
    tags = [t for t, c in zip(POLICY_TAGS, family_counts(gen))
            for _ in range(c)]
    for i, tag in enumerate(tags):
        for attempt in range(gen.max_attempts):
            ss = np.random.SeedSequence([seed, i, attempt])
            record = run_demo_episode(cfg, gen, tag, ss)
            final = record._final_state
            if final.collision and _ego_caused(final):
                stats.discarded_ego_caused += 1
                continue
            del record._final_state
            episodes.append(record)
            stats.kept += 1
            stats.by_family[tag] += 1
            if record.t_coll is not None:
                stats.kept_collisions += 1
            break
        else:
            raise ValueError(
                f"episode {i} ({tag}) still ego-collides after "
                f"{gen.max_attempts} attempts; scenario too hot"
            )
        if stats.reject_rate > gen.max_reject_rate and \
                stats.discarded_ego_caused > 20:
            raise ValueError(
                f"reject rate {stats.reject_rate:.2f} exceeds "
                f"{gen.max_reject_rate}; scenario misconfigured"
            )
    return episodes, stats


# ── History windows ─────────────────────────────────────────────────────────


@dataclass
class HistoryWindow:
    """One training sample: stacked history plus step targets.

    obs_window and prev_actions are zero-copy views into per-episode
    padded arrays (first observation repeated, actions zero-padded).
    next_obs / future_* are None when the episode ends too soon, and
    value_target is None when the H-step sum would cross the episode
    end (those windows are excluded from value training rather than
    zero-padded).
    """

    obs_window: np.ndarray      # (history_len, OBS_DIM)
    prev_actions: np.ndarray    # (history_len, ACT_DIM)
    action: np.ndarray          # (ACT_DIM,)
    reward: float
    next_obs: np.ndarray | None
    value_target: float | None
    future_obs: np.ndarray | None      # (future_len, OBS_DIM)
    future_actions: np.ndarray | None  # (future_len, ACT_DIM)
    future_rewards: np.ndarray | None  # (future_len,)
    episode_index: int
    t: int


def build_history_windows(episodes, history_len: int, value_horizon: int,
                          weights=(1.0, 0.1, 1.0), future_len: int = 1):
    """Slice every episode into per-step windows (views, not copies)."""
    if history_len < 1 or value_horizon < 1 or future_len < 1:
        raise ValueError("history_len, value_horizon, future_len must be >= 1")
    windows = []
    for ei, ep in enumerate(episodes):
        T = ep.length
        padded_obs = np.concatenate(
            [np.repeat(ep.obs[:1], history_len - 1, axis=0), ep.obs], axis=0)
        padded_act = np.concatenate(
            [np.zeros((history_len, ACT_DIM)), ep.act], axis=0)
        totals = ep.totals(weights)
        csum = np.concatenate([[0.0], np.cumsum(totals)])
        for t in range(T):
            fits = t + future_len <= T - 1
            value_ok = t + value_horizon <= T
            windows.append(HistoryWindow(
                obs_window=padded_obs[t:t + history_len],
                prev_actions=padded_act[t:t + history_len],
                action=ep.act[t],
                reward=float(totals[t]),
                next_obs=ep.obs[t + 1] if t + 1 <= T - 1 else None,
                value_target=float(csum[t + value_horizon] - csum[t])
                if value_ok else None,
                future_obs=ep.obs[t + 1:t + 1 + future_len] if fits else None,
                future_actions=ep.act[t:t + future_len] if fits else None,
                future_rewards=totals[t:t + future_len] if fits else None,
                episode_index=ei,
                t=t,
            ))
    return windows


def split_episodes(episodes, seed: int, fractions=(0.8, 0.1, 0.1)):
    """Deterministic shuffled train/val/test split by episode."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    order = np.random.default_rng(seed).permutation(len(episodes))
    n = len(episodes)
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    val = [episodes[i] for i in order[:n_val]]
    test = [episodes[i] for i in order[n_val:n_val + n_test]]
    train = [episodes[i] for i in order[n_val + n_test:]]
    return train, val, test


# ── Compiled batch access ───────────────────────────────────────────────────


class CompiledWindows:
    """Padded, normalized per-episode buffers with cheap window gathers.

    Training loops sample (episode, t) pairs and gather stacked batches
    from these buffers instead of materializing every window up front.
    Padding follows build_history_windows: observations repeat the
    first frame, actions pad with raw zeros; normalization is applied
    after padding so the pad rows equal norm(first_obs) / norm(0),
    matching what a controller sees at the start of a live episode.
    """

    def __init__(self, episodes, norm, history_len: int,
                 weights=(1.0, 0.1, 1.0)):
        if history_len < 1:
            raise ValueError("history_len must be >= 1")
        self.history_len = history_len
        self.norm = norm
        self.obs, self.act, self.totals, self.csum = [], [], [], []
        self.lengths = []
        n_c = history_len
        for ep in episodes:
            padded_obs = np.concatenate(
                [np.repeat(ep.obs[:1], n_c - 1, axis=0), ep.obs])
            padded_act = np.concatenate(
                [np.zeros((n_c, ep.act.shape[1])), ep.act])
            self.obs.append(norm.norm_obs(padded_obs))
            self.act.append(norm.norm_act(padded_act))
            totals = ep.totals(weights)
            self.totals.append(totals)
            self.csum.append(np.concatenate([[0.0], np.cumsum(totals)]))
            self.lengths.append(ep.length)

    def pairs(self, future_len: int = 0,
              value_horizon: int | None = None) -> np.ndarray:
        """(episode, t) pairs with `future_len` steps of lookahead and,
        if given, a complete value_horizon-step return."""
        out = []
        for i, T in enumerate(self.lengths):
            hi = T - 1 - future_len
            if value_horizon is not None:
                hi = min(hi, T - value_horizon)
            for t in range(hi + 1):
                out.append((i, t))
        return np.array(out, dtype=np.int64).reshape(-1, 2)

    def window_batch(self, pairs) -> dict:
        n_c = self.history_len
        obs_w = np.stack([self.obs[i][t:t + n_c] for i, t in pairs])
        prev = np.stack([self.act[i][t:t + n_c] for i, t in pairs])
        action = np.stack([self.act[i][t + n_c] for i, t in pairs])
        reward = np.array([self.totals[i][t] for i, t in pairs])
        return {"obs_window": obs_w, "prev_actions": prev, "action": action,
                "reward": reward}

    def sequence_batch(self, pairs, n_p: int) -> dict:
        """Teacher-forcing batch: n_p actions, true next windows (whose
        last rows are the per-step target frames), raw rewards."""
        n_c = self.history_len
        obs_w = np.stack([self.obs[i][t:t + n_c] for i, t in pairs])
        actions = np.stack(
            [self.act[i][t + n_c:t + n_c + n_p] for i, t in pairs])
        next_w = np.stack(
            [[self.obs[i][t + 1 + j:t + 1 + j + n_c] for j in range(n_p)]
             for i, t in pairs])
        rewards = np.stack([self.totals[i][t:t + n_p] for i, t in pairs])
        return {"obs_window": obs_w, "actions": actions,
                "next_windows": next_w, "rewards": rewards}

    def value_batch(self, pairs, horizon: int) -> dict:
        batch = self.window_batch(pairs)
        batch["target"] = np.array(
            [self.csum[i][t + horizon] - self.csum[i][t] for i, t in pairs])
        return batch


# ── Normalization ───────────────────────────────────────────────────────────


@dataclass
class NormStats:
    """Per-dimension z-scoring constants fitted on the training split."""

    obs_mean: np.ndarray
    obs_std: np.ndarray
    act_mean: np.ndarray
    act_std: np.ndarray
    reward_mean: float
    reward_std: float

    def norm_obs(self, x):
        return (x - self.obs_mean) / self.obs_std

    def denorm_obs(self, x):
        return x * self.obs_std + self.obs_mean

    def norm_act(self, a):
        return (a - self.act_mean) / self.act_std

    def denorm_act(self, a):
        return a * self.act_std + self.act_mean

    def to_dict(self) -> dict:
        return {"obs_mean": self.obs_mean, "obs_std": self.obs_std,
                "act_mean": self.act_mean, "act_std": self.act_std,
                "reward_mean": self.reward_mean, "reward_std": self.reward_std}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["obs_mean"]), np.asarray(d["obs_std"]),
                   np.asarray(d["act_mean"]), np.asarray(d["act_std"]),
                   float(d["reward_mean"]), float(d["reward_std"]))


STD_FLOOR = 1e-6


def compute_norm_stats(episodes, weights=(1.0, 0.1, 1.0)) -> NormStats:
    """Fit per-dimension mean/std over every step of the given episodes."""
    if not episodes:
        raise ValueError("cannot fit normalization on an empty split")
    obs = np.concatenate([ep.obs for ep in episodes])
    act = np.concatenate([ep.act for ep in episodes])
    rew = np.concatenate([ep.totals(weights) for ep in episodes])

    def fit(arr):
        mean = arr.mean(axis=0)
        std = arr.std(axis=0)
        flat = std < STD_FLOOR
        if np.any(flat):
            warnings.warn(f"{int(flat.sum())} constant dimension(s) floored "
                          f"to std {STD_FLOOR}")
        return mean, np.maximum(std, STD_FLOOR)

    om, os_ = fit(obs)
    am, as_ = fit(act)
    rm, rs = fit(rew.reshape(-1, 1))
    return NormStats(om, os_, am, as_, float(rm[0]), float(rs[0]))


def mean_obs_displacement(episodes, horizon: int, norm: NormStats) -> float:
    """Mean normalized L2 distance between observations `horizon` apart."""
    dists = []
    for ep in episodes:
        if ep.length <= horizon:
            continue
        a = norm.norm_obs(ep.obs[:-horizon])
        b = norm.norm_obs(ep.obs[horizon:])
        dists.append(np.linalg.norm(b - a, axis=1))
    if not dists:
        raise ValueError(f"no episode longer than {horizon} steps")
    return float(np.concatenate(dists).mean())


# ── JSON Lines serialization ────────────────────────────────────────────────


def save_episodes(path: str, episodes, weights=(1.0, 0.1, 1.0)) -> None:
    """Write header plus one episode per line."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {"version": DATASET_VERSION, "kind": "episodes",
                  "count": len(episodes),
                  "weights": [float(w) for w in weights]}
        fh.write(json.dumps(header) + "\n")
        for ep in episodes:
            line = {
                "version": DATASET_VERSION,
                "seed": ep.seed,
                "policy_tag": ep.policy_tag,
                "t_coll": ep.t_coll,
                "obs": ep.obs.tolist(),
                "act": ep.act.tolist(),
                "rew_components": ep.rew_components.tolist(),
                "done": ep.done.tolist(),
            }
            fh.write(json.dumps(line) + "\n")


def load_episodes(path: str):
    """Read a dataset file; returns (episodes, weights).

    Malformed lines and version mismatches raise ValueError naming the
    line number.
    """
    episodes = []
    with open(path, encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as err:
            raise ValueError(f"line 1: malformed dataset header ({err})")
        if header.get("version") != DATASET_VERSION:
            raise ValueError(
                f"line 1: dataset version {header.get('version')} "
                f"unsupported (expected {DATASET_VERSION})"
            )
        weights = tuple(header.get("weights", (1.0, 0.1, 1.0)))
        for lineno, raw in enumerate(fh, start=2):
            if not raw.strip():
                continue
            try:
                d = json.loads(raw)
            except json.JSONDecodeError as err:
                raise ValueError(f"line {lineno}: malformed episode ({err})")
            if d.get("version") != DATASET_VERSION:
                raise ValueError(f"line {lineno}: episode version "
                                 f"{d.get('version')} unsupported")
            try:
                episodes.append(EpisodeRecord(
                    seed=d["seed"], policy_tag=d["policy_tag"],
                    obs=d["obs"], act=d["act"],
                    rew_components=d["rew_components"], done=d["done"],
                    t_coll=d["t_coll"],
                ))
            except (KeyError, ValueError) as err:
                raise ValueError(f"line {lineno}: bad episode record ({err})")
    if header.get("count") is not None and header["count"] != len(episodes):
        raise ValueError(
            f"header announced {header['count']} episodes, file has "
            f"{len(episodes)}"
        )
    return episodes, weights
