"""Sampled-rollout planner over the learned models.

Each planning cycle generates N imagined trajectories. Trajectory n
uses BC-policy and dynamics head l = n mod K for every step, and a
latent z_m (m = n mod M, M = N/K) drawn once from the prior and held
fixed across the horizon, so one trajectory commits to one behavior
hypothesis of the surrounding traffic. Actions come from the BC head
plus Gaussian exploration noise, mixed with the previous plan through
the beta coefficient; per-step rewards and the terminal value estimate
average over all K heads. The returned plan is the MPPI
return-weighted average of the sampled action trajectories.

Modes: "umbrella" reweights the full batch, "umbrella_p" first
restricts it to the ensemble head with the lowest summed return (a
pessimistic epistemic filter), "mbop" runs the same loop with z = 0
for a deterministic-model baseline.

Indexing note: the plan T has H entries, T[0] being the action the MPC
driver executes. During a rollout, the action at planning step tau
mixes with T_prev[min(tau + 1, H - 1)] — the previous cycle's plan is
reused unshifted, its slot 0 seeding the action-history window instead
(an optional one-step shift sits behind PlannerConfig.shift_warm_start
for experimentation).

Every random draw comes from a stream derived from (seed, tag, index),
so trajectories are order-independent and a batched rollout equals a
one-trajectory-at-a-time replay to floating-point accuracy.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields

import numpy as np

from .dynamics import DETERMINISTIC, STOCHASTIC, DynamicsEnsemble
from .highway import ScenarioConfig, env_reset, env_step, observe
from .policy_value import BCPolicyEnsemble, ValueEnsemble

PLANNER_MODES = ("umbrella", "umbrella_p", "mbop")

EPS_STREAM_TAG = 11
LATENT_STREAM_TAG = 22
PLAN_STEP_TAG = 33


class PlanError(RuntimeError):
    """A planning cycle could not produce a usable trajectory."""


@dataclass(frozen=True)
class PlannerConfig:
    ensemble_size: int = 2      # K
    horizon: int = 30           # H
    n_trajectories: int = 300   # N
    sigma2: float = 1.2         # exploration noise variance (raw action units)
    beta: float = 0.6           # mixture coefficient toward the previous plan
    kappa: float = 0.5          # MPPI reweighting temperature
    history_len: int = 20       # n_c
    mode: str = "umbrella"
    shift_warm_start: bool = False
    max_nonfinite_frac: float = 0.1

    def __post_init__(self):
        mode = self.mode.replace("-", "_")
        if mode not in PLANNER_MODES:
            raise ValueError(f"mode must be one of {PLANNER_MODES}, "
                             f"got {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.ensemble_size < 1 or self.n_trajectories < 1:
            raise ValueError("ensemble_size and n_trajectories must be >= 1")
        if self.n_trajectories % self.ensemble_size != 0:
            raise ValueError(
                f"n_trajectories ({self.n_trajectories}) must be divisible "
                f"by ensemble_size ({self.ensemble_size})"
            )
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if not 0.0 <= self.max_nonfinite_frac <= 1.0:
            raise ValueError("max_nonfinite_frac must lie in [0, 1]")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "PlannerConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ValueError(f"unknown planner keys: {', '.join(unknown)}")
        return cls(**mapping)


@dataclass
class ModelSet:
    """The three trained ensembles a planner consumes."""

    dynamics: DynamicsEnsemble
    bc: BCPolicyEnsemble
    value: ValueEnsemble

    def __post_init__(self):
        sizes = {self.dynamics.size, self.bc.size, self.value.size}
        if len(sizes) != 1:
            raise ValueError(f"ensembles disagree on K: {sorted(sizes)}")
        lens = {self.dynamics.cfg.history_len, self.bc.cfg.history_len,
                self.value.cfg.history_len}
        if len(lens) != 1:
            raise ValueError(f"ensembles disagree on history length: "
                             f"{sorted(lens)}")
        for other in (self.bc.norm, self.value.norm):
            if not (np.array_equal(self.norm.obs_mean, other.obs_mean)
                    and np.array_equal(self.norm.act_mean, other.act_mean)):
                raise ValueError("ensembles carry different NormStats")

    @property
    def norm(self):
        return self.dynamics.norm

    @property
    def size(self) -> int:
        return self.dynamics.size

    @property
    def history_len(self) -> int:
        return self.dynamics.cfg.history_len


@dataclass
class ControlHistory:
    """Raw observation and executed-action windows, newest entries last."""

    obs: np.ndarray  # (n_c, d_o)
    act: np.ndarray  # (n_c, d_a)

    @classmethod
    def initial(cls, obs0, history_len: int, act_dim: int = 2):
        obs0 = np.asarray(obs0, dtype=np.float64)
        return cls(np.repeat(obs0[None], history_len, axis=0),
                   np.zeros((history_len, act_dim)))

    def push(self, action, obs) -> None:
        self.act = np.concatenate([self.act[1:],
                                   np.asarray(action, dtype=np.float64)[None]])
        self.obs = np.concatenate([self.obs[1:],
                                   np.asarray(obs, dtype=np.float64)[None]])


@dataclass
class TrajectoryBatch:
    actions: np.ndarray       # (N, H, d_a), raw action units
    returns: np.ndarray       # (N,)
    head_index: np.ndarray    # (N,), l = n mod K
    latent_index: np.ndarray  # (N,), m = n mod M
    latents: np.ndarray       # (M, n_z) as used (zeros under mbop)
    valid: np.ndarray         # (N,) bool, finite rollouts only


@dataclass
class PlanResult:
    optimal: np.ndarray                 # (H, d_a)
    batch: TrajectoryBatch
    pessimistic_head: int | None
    diagnostics: dict


def _check_models(models: ModelSet, cfg: PlannerConfig) -> None:
    if models.size != cfg.ensemble_size:
        raise PlanError(f"config expects K={cfg.ensemble_size}, models "
                        f"provide K={models.size}")
    if models.history_len != cfg.history_len:
        raise PlanError(f"config expects n_c={cfg.history_len}, models "
                        f"provide n_c={models.history_len}")
    if cfg.mode != "mbop" and models.dynamics.mode != STOCHASTIC:
        raise PlanError(f"mode {cfg.mode!r} needs a stochastic dynamics "
                        f"ensemble; got a {models.dynamics.mode} one "
                        f"(use mode 'mbop' for that)")


def rollout_trajectories(history: ControlHistory, prev_plan, models: ModelSet,
                         cfg: PlannerConfig, seed: int) -> TrajectoryBatch:
    """Sample N trajectories from the models under the warm-start plan.

    prev_plan is the previous cycle's (H, d_a) raw plan or None at the
    start of an episode (treated as zeros). Non-finite rollouts are
    flagged invalid with a warning rather than raised.
    """
    _check_models(models, cfg)
    norm = models.norm
    K, H, N = cfg.ensemble_size, cfg.horizon, cfg.n_trajectories
    M = N // K
    n_c = cfg.history_len
    d_a = models.bc.cfg.act_dim
    if prev_plan is None:
        prev_plan = np.zeros((H, d_a))
    prev_plan = np.asarray(prev_plan, dtype=np.float64)
    if prev_plan.shape != (H, d_a):
        raise PlanError(f"previous plan has shape {prev_plan.shape}, "
                        f"expected {(H, d_a)}")
    if not (np.all(np.isfinite(history.obs))
            and np.all(np.isfinite(history.act))
            and np.all(np.isfinite(prev_plan))):
        raise PlanError("non-finite planner inputs")

    n_z = models.dynamics.cfg.latent_dim
    if cfg.mode == "mbop":
        latents = np.zeros((M, n_z))
    else:
        latents = np.stack([
            np.random.default_rng(np.random.SeedSequence(
                [seed, LATENT_STREAM_TAG, m])).standard_normal(n_z)
            for m in range(M)
        ])
    sigma = np.sqrt(cfg.sigma2)
    noise = np.stack([
        np.random.default_rng(np.random.SeedSequence(
            [seed, EPS_STREAM_TAG, n])).normal(0.0, sigma, size=(H, d_a))
        for n in range(N)
    ])

    head_index = np.arange(N) % K
    latent_index = np.arange(N) % M
    z_rows = latents[latent_index]
    rows_by_head = [np.nonzero(head_index == l)[0] for l in range(K)]

    # The slot for "the previous action" at the first planning step is
    # the warm start's first entry; older slots come from what the ego
    # actually executed.
    base_act = np.concatenate([history.act[1:], prev_plan[:1]])
    obs_win = np.repeat(norm.norm_obs(history.obs)[None], N, axis=0)
    act_win = np.repeat(norm.norm_act(base_act)[None], N, axis=0)

    actions = np.zeros((N, H, d_a))
    returns = np.zeros(N)
    # Rows whose rollout went non-finite get zeroed windows so the rest
    # of the batch keeps computing; they are flagged invalid at the end.
    dead = np.zeros(N, dtype=bool)
    with np.errstate(all="ignore"):
        for tau in range(H):
            a_norm = np.zeros((N, d_a))
            for l in range(K):
                rows = rows_by_head[l]
                a_norm[rows] = models.bc.heads[l].forward(
                    models.bc.features(obs_win[rows], act_win[rows]))
            a_raw = norm.denorm_act(a_norm) + noise[:, tau]
            mixed = (1.0 - cfg.beta) * a_raw \
                + cfg.beta * prev_plan[min(tau + 1, H - 1)]
            actions[:, tau] = mixed
            dead |= ~np.all(np.isfinite(mixed), axis=1)
            mixed_norm = norm.norm_act(np.where(dead[:, None], 0.0, mixed))

            frames_own = np.zeros((N, obs_win.shape[2]))
            for i, head in enumerate(models.dynamics.heads):
                frames, rewards = head.predict_step(obs_win, mixed_norm,
                                                    z_rows)
                returns += rewards / K
                rows = rows_by_head[i]
                frames_own[rows] = frames[rows]
            dead |= ~np.all(np.isfinite(frames_own), axis=1)
            frames_own[dead] = 0.0
            obs_win = np.concatenate([obs_win[:, 1:], frames_own[:, None]],
                                     axis=1)
            act_win = np.concatenate([act_win[:, 1:], mixed_norm[:, None]],
                                     axis=1)
        returns += models.value.estimate_all(obs_win, act_win).mean(axis=0)
    returns = np.where(dead, np.nan, returns)

    valid = np.isfinite(returns) \
        & np.all(np.isfinite(actions.reshape(N, -1)), axis=1)
    if not np.all(valid):
        warnings.warn(f"{int(N - valid.sum())} of {N} rollouts were "
                      f"non-finite and excluded")
    return TrajectoryBatch(actions, returns, head_index, latent_index,
                           latents, valid)


def _mppi_weights(returns: np.ndarray, kappa: float) -> np.ndarray:
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    shifted = kappa * (returns - returns.max())
    w = np.exp(shifted)
    total = w.sum()
    assert total > 0.0  # the max-return row contributes exactly 1
    return w / total


def mppi_reweight(actions: np.ndarray, returns: np.ndarray,
                  kappa: float) -> np.ndarray:
    """Return-weighted average plan over (n, H, d_a) trajectories."""
    actions = np.asarray(actions, dtype=np.float64)
    returns = np.asarray(returns, dtype=np.float64)
    if len(returns) == 0:
        raise ValueError("cannot reweight an empty trajectory set")
    w = _mppi_weights(returns, kappa)
    return np.einsum("n,nhd->hd", w, actions)


def pessimistic_select(batch: TrajectoryBatch):
    """Head with the lowest summed return over its valid trajectories.

    Returns (head index, row indices of that head's valid rows). Ties
    break toward the lower head index; heads with no valid rows are
    skipped.
    """
    K = batch.head_index.max() + 1 if len(batch.head_index) else 0
    sums = np.full(K, np.inf)
    for l in range(K):
        rows = (batch.head_index == l) & batch.valid
        if np.any(rows):
            sums[l] = batch.returns[rows].sum()
    if not np.any(np.isfinite(sums)):
        raise PlanError("no valid trajectories to select from")
    k_star = int(np.argmin(sums))
    rows = np.nonzero((batch.head_index == k_star) & batch.valid)[0]
    return k_star, rows


def plan(history: ControlHistory, prev_plan, models: ModelSet,
         cfg: PlannerConfig, seed: int) -> PlanResult:
    """One full planning cycle in the configured mode."""
    batch = rollout_trajectories(history, prev_plan, models, cfg, seed)
    n_valid = int(batch.valid.sum())
    excluded = len(batch.valid) - n_valid
    if excluded > cfg.max_nonfinite_frac * len(batch.valid):
        raise PlanError(
            f"{excluded} of {len(batch.valid)} rollouts non-finite, above "
            f"the {cfg.max_nonfinite_frac:.0%} tolerance; models diverged"
        )
    k_star = None
    if cfg.mode == "umbrella_p":
        k_star, rows = pessimistic_select(batch)
    else:
        rows = np.nonzero(batch.valid)[0]
    optimal = mppi_reweight(batch.actions[rows], batch.returns[rows],
                            cfg.kappa)
    w = _mppi_weights(batch.returns[rows], cfg.kappa)
    entropy = float(-(w * np.log(np.maximum(w, 1e-300))).sum())
    diagnostics = {"n_valid": n_valid, "n_used": len(rows),
                   "max_weight": float(w.max()),
                   "weight_entropy": entropy,
                   "best_return": float(batch.returns[rows].max())}
    return PlanResult(optimal, batch, k_star, diagnostics)


# ── Closed-loop MPC driver ──────────────────────────────────────────────────


@dataclass
class EpisodeTrace:
    """Everything the metrics layer needs from one closed-loop episode."""

    seed: int
    label: str
    dt: float
    actions: np.ndarray          # (T, d_a) executed
    rew_components: np.ndarray   # (T, 3)
    ego_x: np.ndarray            # (T,) post-step
    ego_y: np.ndarray
    ego_v: np.ndarray
    collision: bool
    goal_reached: bool
    success: bool
    diagnostics: list | None = None

    @property
    def length(self) -> int:
        return len(self.actions)


def episode_success(state) -> bool:
    cfg = state.config
    if state.collision:
        return False
    if cfg.success_mode == "goal":
        return state.goal_remaining <= 0.0
    return True


def _plan_seed(episode_seed: int, t: int) -> int:
    return int(np.random.SeedSequence(
        [episode_seed, PLAN_STEP_TAG, t]).generate_state(1, np.uint64)[0])


def shift_plan(plan_actions: np.ndarray) -> np.ndarray:
    """Drop the executed first action, repeat the last (optional mode)."""
    return np.concatenate([plan_actions[1:], plan_actions[-1:]])


def episode_reset(scenario: ScenarioConfig, seed: int):
    """(initial EnvState, step rng) for one evaluation episode.

    Every episode runner derives its streams through this function, so
    paired seeds see identical scenarios regardless of the controller.
    """
    reset_ss, step_ss = np.random.SeedSequence(seed).spawn(2)
    state = env_reset(scenario, np.random.default_rng(reset_ss))
    return state, np.random.default_rng(step_ss)


def mpc_episode(scenario: ScenarioConfig, models: ModelSet,
                cfg: PlannerConfig, seed: int,
                label: str | None = None) -> EpisodeTrace:
    """Closed-loop episode: plan, execute the first action, warm-start
    the next cycle with the resulting plan."""
    state, step_rng = episode_reset(scenario, seed)
    history = ControlHistory.initial(observe(state), cfg.history_len)
    warm = None
    acts, rews, xs, ys, vs, diags = [], [], [], [], [], []
    while not state.done:
        t = state.t
        try:
            result = plan(history, warm, models, cfg, _plan_seed(seed, t))
            action = result.optimal[0]
            state = env_step(state, action, step_rng)
        except Exception as err:
            raise RuntimeError(f"episode step {t}: {err}") from err
        history.push(action, observe(state))
        warm = shift_plan(result.optimal) if cfg.shift_warm_start \
            else result.optimal
        acts.append(action)
        rews.append(state.reward_components)
        xs.append(state.ego.x)
        ys.append(state.ego.y)
        vs.append(state.ego.v)
        diags.append(result.diagnostics)
    return EpisodeTrace(
        seed=seed, label=label or cfg.mode, dt=scenario.dt,
        actions=np.array(acts).reshape(-1, 2),
        rew_components=np.array(rews).reshape(-1, 3),
        ego_x=np.array(xs), ego_y=np.array(ys), ego_v=np.array(vs),
        collision=state.collision, goal_reached=state.goal_remaining <= 0.0,
        success=episode_success(state), diagnostics=diags,
    )
