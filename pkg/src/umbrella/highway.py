"""Multi-lane highway simulator.

Kinematic ego vehicle plus scripted traffic on a straight road. Other
agents follow a per-step Markov chain over behavior modes (keep lane,
cut in, brake) and are non-reactive to the ego, log-replay style: their
car-following logic sees only other scripted agents, so the ego can be
rear-ended if it parks in front of someone. Episodes are driven by an
external loop that owns the rng; stepping never mutates its input
state, so a given (config, seed, action sequence) always replays to
the identical trajectory.

Observations are translation-invariant 22-vectors: four ego features
(speed, lateral position, offset from the nearest lane center,
distance to goal) and six neighbor slots (lead/follow in the ego lane
and in both adjacent lanes), each slot (dx clipped to +-60 m, relative
speed, presence flag) with (+-60, 0, 0) marking an empty slot.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace

import numpy as np

BEHAVIOR_MODES = ("keep", "cut_in", "brake")
OBS_DIM = 22
ACT_DIM = 2

# Neighbor slot order: (lane offset, +1 lead / -1 follow).
SLOT_LAYOUT = ((0, 1), (0, -1), (-1, 1), (-1, -1), (1, 1), (1, -1))
NEIGHBOR_CLIP = 60.0


# ── Configuration ───────────────────────────────────────────────────────────


@dataclass(frozen=True)
class ScenarioConfig:
    """Scenario tunables. Every field has a working default.

    Geometry and timing: lane_count lanes of lane_width meters, dt
    seconds per step, episode capped at horizon_steps. The goal sits
    goal_distance meters ahead of the ego spawn. Ego actions are
    (speed delta, lateral delta) per step, clamped to dv_bounds /
    dy_bounds before integration; speeds clamp to [0, v_max] and the
    progress reward is gated at v_limit.
    """

    lane_count: int = 3
    lane_width: float = 3.7
    dt: float = 0.1
    horizon_steps: int = 80
    vehicle_length: float = 4.5
    vehicle_width: float = 1.8
    v_max: float = 15.0
    v_limit: float = 13.0
    goal_distance: float = 300.0
    success_mode: str = "collision_free"  # or "goal"

    # Ego spawn and action bounds.
    ego_lane: int = 1
    ego_speed_range: tuple = (8.0, 11.0)
    dv_bounds: tuple = (-0.8, 0.6)
    dy_bounds: tuple = (-0.4, 0.4)

    # Traffic spawn.
    agent_count: int = 5
    spawn_ahead_range: tuple = (12.0, 40.0)
    spawn_behind_range: tuple = (-35.0, -12.0)
    agent_speed_range: tuple = (6.0, 11.0)
    agent_v_des_range: tuple = (6.0, 12.0)
    min_spawn_gap: float = 8.0

    # Scripted behavior. Rows of transition_matrix follow BEHAVIOR_MODES
    # order and give per-step mode switch probabilities.
    transition_matrix: tuple = (
        (0.985, 0.010, 0.005),
        (0.070, 0.930, 0.000),
        (0.120, 0.000, 0.880),
    )
    brake_decel: float = 2.0
    cut_in_steps: int = 10
    keep_gain: float = 0.6
    keep_accel_max: float = 2.0
    keep_lat_step: float = 0.2
    follow_gap: float = 6.0
    follow_headway: float = 1.0

    # Reward weights (progress, lane keeping, collision) and the
    # per-step discount applied inside the progress term.
    w_progress: float = 1.0
    w_lane: float = 0.1
    w_collision: float = 1.0
    progress_discount: float = 0.99

    def __post_init__(self):
        for name in ("ego_speed_range", "dv_bounds", "dy_bounds",
                     "spawn_ahead_range", "spawn_behind_range",
                     "agent_speed_range", "agent_v_des_range"):
            pair = tuple(float(v) for v in getattr(self, name))
            if len(pair) != 2 or pair[0] > pair[1]:
                raise ValueError(f"{name} must be an ordered (lo, hi) pair")
            object.__setattr__(self, name, pair)
        matrix = tuple(tuple(float(p) for p in row)
                       for row in self.transition_matrix)
        if len(matrix) != 3 or any(len(row) != 3 for row in matrix):
            raise ValueError("transition_matrix must be 3x3")
        for row in matrix:
            if any(p < 0 for p in row) or abs(sum(row) - 1.0) > 1e-9:
                raise ValueError("transition_matrix rows must sum to 1")
        object.__setattr__(self, "transition_matrix", matrix)
        if self.lane_count < 1:
            raise ValueError("lane_count must be positive")
        if not 0 <= self.ego_lane < self.lane_count:
            raise ValueError("ego_lane outside the road")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon_steps < 0 or self.agent_count < 0:
            raise ValueError("horizon_steps and agent_count must be >= 0")
        if self.v_max <= 0 or self.goal_distance <= 0:
            raise ValueError("v_max and goal_distance must be positive")
        if self.success_mode not in ("collision_free", "goal"):
            raise ValueError("success_mode must be collision_free or goal")

    @property
    def road_width(self) -> float:
        return self.lane_count * self.lane_width

    def lane_center(self, index: int) -> float:
        return (index + 0.5) * self.lane_width

    def nearest_lane(self, y: float) -> int:
        idx = int(np.floor(y / self.lane_width))
        return min(max(idx, 0), self.lane_count - 1)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ValueError(f"unknown scenario keys: {', '.join(unknown)}")
        return cls(**mapping)

    @classmethod
    def from_file(cls, path: str) -> "ScenarioConfig":
        with open(path, encoding="utf-8") as fh:
            mapping = json.load(fh)
        if not isinstance(mapping, dict):
            raise ValueError("scenario config file must hold a JSON object")
        return cls.from_mapping(mapping)


# ── State ───────────────────────────────────────────────────────────────────


@dataclass
class AgentState:
    """One vehicle. Scripted agents also carry their mode bookkeeping."""

    x: float
    y: float
    v: float
    length: float
    width: float
    mode: str = "keep"
    v_des: float = 0.0
    target_y: float | None = None

    def copy(self) -> "AgentState":
        return replace(self)


@dataclass
class EnvState:
    """Value-semantics environment snapshot."""

    config: ScenarioConfig
    t: int
    ego: AgentState
    others: list
    goal_remaining: float
    collision: bool = False
    done: bool = False
    reward_components: tuple = (0.0, 0.0, 0.0)  # (progress, lane, collision)

    @property
    def reward(self) -> float:
        c = self.config
        p, l, k = self.reward_components
        return c.w_progress * p + c.w_lane * l + c.w_collision * k


def collision_check(a: AgentState, b: AgentState) -> bool:
    """Axis-aligned rectangle overlap; touching counts as collision."""
    return (abs(a.x - b.x) <= (a.length + b.length) / 2.0
            and abs(a.y - b.y) <= (a.width + b.width) / 2.0)


# ── Reset ───────────────────────────────────────────────────────────────────

_SPAWN_SLOTS = ((0, "ahead"), (-1, "ahead"), (1, "ahead"),
                (-1, "behind"), (1, "behind"), (0, "behind"))


def env_reset(config: ScenarioConfig, seed) -> EnvState:
    """Spawn the ego and scripted traffic without initial overlap."""
    rng = seed if isinstance(seed, np.random.Generator) else \
        np.random.default_rng(seed)
    ego = AgentState(
        x=0.0,
        y=config.lane_center(config.ego_lane),
        v=float(rng.uniform(*config.ego_speed_range)),
        length=config.vehicle_length,
        width=config.vehicle_width,
    )
    others: list = []
    for i in range(config.agent_count):
        lane_off, side = _SPAWN_SLOTS[i % len(_SPAWN_SLOTS)]
        lane = config.ego_lane + lane_off
        if not 0 <= lane < config.lane_count:
            lane = int(rng.integers(config.lane_count))
        placed = False
        for _ in range(200):
            rng_range = (config.spawn_ahead_range if side == "ahead"
                         else config.spawn_behind_range)
            x = float(rng.uniform(*rng_range))
            cand = AgentState(
                x=x,
                y=config.lane_center(lane),
                v=float(rng.uniform(*config.agent_speed_range)),
                length=config.vehicle_length,
                width=config.vehicle_width,
                v_des=float(rng.uniform(*config.agent_v_des_range)),
            )
            clear = not collision_check(cand, ego) and all(
                not collision_check(cand, o) for o in others
            ) and all(
                abs(cand.x - o.x) >= config.min_spawn_gap
                or abs(cand.y - o.y) > config.lane_width / 2
                for o in others
            ) and (abs(cand.x - ego.x) >= config.min_spawn_gap
                   or abs(cand.y - ego.y) > config.lane_width / 2)
            if clear:
                others.append(cand)
                placed = True
                break
        if not placed:
            raise ValueError("spawn congestion: could not place traffic "
                             "without overlap, loosen spawn ranges")
    return EnvState(
        config=config,
        t=0,
        ego=ego,
        others=others,
        goal_remaining=config.goal_distance,
        done=config.horizon_steps == 0,
    )


# ── Scripted traffic ────────────────────────────────────────────────────────


def _transition_mode(mode: str, matrix, rng) -> str:
    row = matrix[BEHAVIOR_MODES.index(mode)]
    u = rng.random()
    acc = 0.0
    for name, p in zip(BEHAVIOR_MODES, row):
        acc += p
        if u < acc:
            return name
    return BEHAVIOR_MODES[-1]


def scripted_agent_step(agent: AgentState, neighbors, config: ScenarioConfig,
                        rng) -> AgentState:
    """Advance one scripted agent.

    neighbors are the other scripted agents only; the ego is not in the
    list, which is what makes the traffic non-reactive to it.
    """
    nxt = agent.copy()
    nxt.mode = _transition_mode(agent.mode, config.transition_matrix, rng)
    if nxt.mode != "cut_in":
        nxt.target_y = None

    lat_step = config.lane_width / config.cut_in_steps
    if nxt.mode == "keep":
        accel = config.keep_gain * (nxt.v_des - nxt.v)
        lead = _nearest_lead(nxt, neighbors, config)
        if lead is not None:
            gap = lead.x - nxt.x - nxt.length
            if gap < config.follow_gap + nxt.v * config.follow_headway:
                accel = min(accel, -config.brake_decel)
        accel = float(np.clip(accel, -config.brake_decel,
                              config.keep_accel_max))
        nxt.v = float(np.clip(nxt.v + accel * config.dt, 0.0, config.v_max))
        center = config.lane_center(config.nearest_lane(nxt.y))
        nxt.y += float(np.clip(center - nxt.y, -config.keep_lat_step,
                               config.keep_lat_step))
    elif nxt.mode == "cut_in":
        if nxt.target_y is None:
            lane = config.nearest_lane(nxt.y)
            options = [l for l in (lane - 1, lane + 1)
                       if 0 <= l < config.lane_count]
            lane_to = options[int(rng.integers(len(options)))] if options else lane
            nxt.target_y = config.lane_center(lane_to)
        nxt.y += float(np.clip(nxt.target_y - nxt.y, -lat_step, lat_step))
        if abs(nxt.y - nxt.target_y) < 0.05:
            nxt.mode = "keep"
            nxt.target_y = None
    else:  # brake
        nxt.v = max(0.0, nxt.v - config.brake_decel * config.dt)
        center = config.lane_center(config.nearest_lane(nxt.y))
        nxt.y += float(np.clip(center - nxt.y, -config.keep_lat_step,
                               config.keep_lat_step))

    half = nxt.width / 2.0
    nxt.y = float(np.clip(nxt.y, half, config.road_width - half))
    nxt.x += nxt.v * config.dt
    return nxt


def _nearest_lead(agent: AgentState, neighbors, config: ScenarioConfig):
    lane = config.nearest_lane(agent.y)
    best = None
    for other in neighbors:
        if other is agent or config.nearest_lane(other.y) != lane:
            continue
        if other.x <= agent.x:
            continue
        if best is None or other.x < best.x:
            best = other
    return best


# ── Stepping ────────────────────────────────────────────────────────────────


def env_step(state: EnvState, action, rng) -> EnvState:
    """Advance one step. Returns a fresh EnvState; the input is untouched."""
    if state.done:
        raise ValueError("env_step called on a finished episode")
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (ACT_DIM,) or not np.all(np.isfinite(action)):
        raise ValueError(f"ego action must be 2 finite values, got {action}")
    cfg = state.config
    dv = float(np.clip(action[0], *cfg.dv_bounds))
    dy = float(np.clip(action[1], *cfg.dy_bounds))

    ego = state.ego.copy()
    ego.v = float(np.clip(ego.v + dv, 0.0, cfg.v_max))
    half = ego.width / 2.0
    ego.y = float(np.clip(ego.y + dy, half, cfg.road_width - half))
    ego.x += ego.v * cfg.dt

    scripted = [a.copy() for a in state.others]
    others = [scripted_agent_step(a, scripted, cfg, rng) for a in scripted]

    collided = any(collision_check(ego, o) for o in others)

    progressed = ego.x - state.ego.x
    goal_remaining = state.goal_remaining - progressed
    gamma_t = cfg.progress_discount ** state.t
    r_prog = gamma_t * progressed if ego.v <= cfg.v_limit else 0.0
    center = cfg.lane_center(cfg.nearest_lane(ego.y))
    r_lane = -((ego.y - center) ** 2)
    r_coll = -2.0 if collided else 0.0

    t = state.t + 1
    done = collided or goal_remaining <= 0.0 or t >= cfg.horizon_steps
    return EnvState(
        config=cfg,
        t=t,
        ego=ego,
        others=others,
        goal_remaining=goal_remaining,
        collision=collided,
        done=done,
        reward_components=(r_prog, r_lane, r_coll),
    )


# ── Observation ─────────────────────────────────────────────────────────────


def observe(state: EnvState) -> np.ndarray:
    """22-dim translation-invariant feature vector for the ego."""
    cfg = state.config
    ego = state.ego
    center = cfg.lane_center(cfg.nearest_lane(ego.y))
    out = np.empty(OBS_DIM)
    out[0] = ego.v
    out[1] = ego.y
    out[2] = ego.y - center
    out[3] = state.goal_remaining
    ego_lane = cfg.nearest_lane(ego.y)
    for i, (lane_off, direction) in enumerate(SLOT_LAYOUT):
        base = 4 + 3 * i
        lane = ego_lane + lane_off
        slot = None
        if 0 <= lane < cfg.lane_count:
            best_dx = None
            for other in state.others:
                if cfg.nearest_lane(other.y) != lane:
                    continue
                dx = other.x - ego.x
                if direction == 1 and dx < 0:
                    continue
                if direction == -1 and dx >= 0:
                    continue
                if best_dx is None or abs(dx) < abs(best_dx):
                    best_dx = dx
                    slot = other
        if slot is None:
            out[base] = direction * NEIGHBOR_CLIP
            out[base + 1] = 0.0
            out[base + 2] = 0.0
        else:
            out[base] = float(np.clip(slot.x - ego.x, -NEIGHBOR_CLIP,
                                      NEIGHBOR_CLIP))
            out[base + 1] = slot.v - ego.v
            out[base + 2] = 1.0
    return out
