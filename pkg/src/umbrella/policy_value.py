"""Behavior-cloned policy and truncated value function ensembles.

Both are plain feed-forward regressors over the same normalized
feature layout the dynamics model consumes: the flattened observation
window concatenated with the flattened previous-action window. The BC
policy predicts the normalized current action; the value function
predicts the H-step return sum.

Value targets are z-scored internally before regression (their raw
magnitude, tens of reward units, would otherwise take Adam far longer
to reach than a training budget allows); the fitted target stats live
in the checkpoint and estimates are always returned in raw units.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import STD_FLOOR, CompiledWindows, NormStats
from .nnkit import (
    Gradients,
    Network,
    NetworkSpec,
    adam_step,
    load_checkpoint,
    save_checkpoint,
)

DIVERGENCE_FACTOR = 1e3


@dataclass(frozen=True)
class BCConfig:
    obs_dim: int = 22
    act_dim: int = 2
    history_len: int = 20
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    dropout: float = 0.0
    train_steps: int = 5000
    batch_size: int = 32
    learning_rate: float = 1e-4
    ensemble_size: int = 2
    val_interval: int = 250
    val_batch_cap: int = 1024

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        _validate_common(self)

    @property
    def out_dim(self) -> int:
        return self.act_dim

    def network_spec(self) -> NetworkSpec:
        in_dim = self.history_len * (self.obs_dim + self.act_dim)
        return NetworkSpec((in_dim, *self.hidden, self.out_dim),
                           self.activation, self.dropout)

    @classmethod
    def from_mapping(cls, mapping: dict):
        return _from_mapping(cls, mapping, "bc")


@dataclass(frozen=True)
class ValueConfig:
    obs_dim: int = 22
    act_dim: int = 2
    history_len: int = 20
    horizon: int = 30
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    dropout: float = 0.1
    train_steps: int = 5000
    batch_size: int = 32
    learning_rate: float = 1e-4
    ensemble_size: int = 2
    val_interval: int = 250
    val_batch_cap: int = 1024

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        _validate_common(self)

    @property
    def out_dim(self) -> int:
        return 1

    def network_spec(self) -> NetworkSpec:
        in_dim = self.history_len * (self.obs_dim + self.act_dim)
        return NetworkSpec((in_dim, *self.hidden, self.out_dim),
                           self.activation, self.dropout)

    @classmethod
    def from_mapping(cls, mapping: dict):
        return _from_mapping(cls, mapping, "value")


def _validate_common(cfg):
    if min(cfg.obs_dim, cfg.act_dim, cfg.history_len, cfg.batch_size) < 1:
        raise ValueError("dimensions and lengths must be >= 1")
    if cfg.ensemble_size < 1:
        raise ValueError("ensemble_size must be >= 1")


def _from_mapping(cls, mapping, label):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise ValueError(f"unknown {label} keys: {', '.join(unknown)}")
    return cls(**mapping)


class _FeedForwardEnsemble:
    """K identically shaped heads over the shared feature layout."""

    kind = None

    def __init__(self, heads, norm: NormStats, cfg, head_seeds):
        if len(heads) != cfg.ensemble_size:
            raise ValueError("head count differs from ensemble_size")
        if len(set(head_seeds)) != len(head_seeds):
            raise ValueError("head seeds must be pairwise distinct")
        self.heads = list(heads)
        self.norm = norm
        self.cfg = cfg
        self.head_seeds = [int(s) for s in head_seeds]

    @classmethod
    def create(cls, cfg, norm: NormStats, seed: int):
        seeds = [int(np.random.SeedSequence([seed, k]).generate_state(
            1, np.uint64)[0]) for k in range(cfg.ensemble_size)]
        heads = [Network.init(cfg.network_spec(), s) for s in seeds]
        return cls(heads, norm, cfg, seeds)

    @property
    def size(self) -> int:
        return len(self.heads)

    def features(self, obs_window, prev_actions) -> np.ndarray:
        """Flatten and concatenate normalized windows; accepts a single
        (n_c, d) pair or batches with a leading axis."""
        w = np.asarray(obs_window, dtype=np.float64)
        a = np.asarray(prev_actions, dtype=np.float64)
        single = w.ndim == 2
        if single:
            w, a = w[None], a[None]
        if w.shape[1] != self.cfg.history_len or \
                a.shape[1] != self.cfg.history_len:
            raise ValueError(
                f"history length {w.shape[1]}/{a.shape[1]} does not match "
                f"configured {self.cfg.history_len}"
            )
        x = np.concatenate([w.reshape(w.shape[0], -1),
                            a.reshape(a.shape[0], -1)], axis=1)
        return x[0] if single else x

    def _save_payload(self) -> dict:
        return {"config": asdict(self.cfg), "norm": self.norm.to_dict(),
                "head_seeds": self.head_seeds,
                "heads": [h.state() for h in self.heads]}

    def save(self, path: str) -> None:
        save_checkpoint(path, self.kind, self._save_payload())


class BCPolicyEnsemble(_FeedForwardEnsemble):
    kind = "bc_ensemble"

    def act(self, head_index: int, obs_window, prev_actions) -> np.ndarray:
        """Normalized action of one head; pure at inference."""
        return self.heads[head_index].forward(
            self.features(obs_window, prev_actions))

    def act_all(self, obs_window, prev_actions) -> np.ndarray:
        """(K, ...) stacked head outputs for one shared feature batch."""
        x = self.features(obs_window, prev_actions)
        return np.stack([h.forward(x) for h in self.heads])

    def act_mean(self, obs_window, prev_actions) -> np.ndarray:
        return self.act_all(obs_window, prev_actions).mean(axis=0)

    @classmethod
    def load(cls, path: str) -> "BCPolicyEnsemble":
        d = load_checkpoint(path, cls.kind)
        cfg = BCConfig.from_mapping(d["config"])
        return cls([Network.from_state(h) for h in d["heads"]],
                   NormStats.from_dict(d["norm"]), cfg, d["head_seeds"])


class ValueEnsemble(_FeedForwardEnsemble):
    kind = "value_ensemble"

    def __init__(self, heads, norm, cfg, head_seeds, target_mean=0.0,
                 target_std=1.0):
        super().__init__(heads, norm, cfg, head_seeds)
        self.target_mean = float(target_mean)
        self.target_std = float(target_std)

    def estimate(self, head_index: int, obs_window, prev_actions):
        """Raw-return estimate of one head."""
        out = self.heads[head_index].forward(
            self.features(obs_window, prev_actions))
        return out[..., 0] * self.target_std + self.target_mean

    def estimate_all(self, obs_window, prev_actions) -> np.ndarray:
        x = self.features(obs_window, prev_actions)
        raw = np.stack([h.forward(x)[..., 0] for h in self.heads])
        return raw * self.target_std + self.target_mean

    def estimate_mean(self, obs_window, prev_actions):
        return self.estimate_all(obs_window, prev_actions).mean(axis=0)

    def _save_payload(self) -> dict:
        payload = super()._save_payload()
        payload["target_mean"] = self.target_mean
        payload["target_std"] = self.target_std
        return payload

    @classmethod
    def load(cls, path: str) -> "ValueEnsemble":
        d = load_checkpoint(path, cls.kind)
        cfg = ValueConfig.from_mapping(d["config"])
        return cls([Network.from_state(h) for h in d["heads"]],
                   NormStats.from_dict(d["norm"]), cfg, d["head_seeds"],
                   d["target_mean"], d["target_std"])


# ── Training ────────────────────────────────────────────────────────────────


def _mse_and_grads(head: Network, x, y, rng, train=True):
    pred, tape = head.forward_tape(x, train, rng)
    err = pred - y
    B = x.shape[0]
    loss = float((err ** 2).sum() / B)
    grads, _ = head.backward(tape, (2.0 / B) * err)
    return loss, grads


def _run_regression(ensemble, make_batch, val_x, val_y, seed, steps):
    """Shared loop: identical batch order per head, per-head noise."""
    cfg = ensemble.cfg
    curves = []
    for k, head in enumerate(ensemble.heads):
        batch_rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
        noise_rng = np.random.default_rng(
            np.random.SeedSequence([seed, 202, k]))
        initial = None
        for step in range(steps):
            x, y = make_batch(batch_rng)
            loss, grads = _mse_and_grads(head, x, y, noise_rng)
            if initial is None:
                initial = max(loss, 1e-8)
            if not np.isfinite(loss) or loss > DIVERGENCE_FACTOR * initial:
                raise RuntimeError(
                    f"{ensemble.kind} head {k} diverged at step {step}: "
                    f"loss {loss:.4g} vs initial {initial:.4g}"
                )
            adam_step(head.params, grads, cfg.learning_rate)
            if step % cfg.val_interval == 0 or step == steps - 1:
                val_pred = head.forward(val_x)
                val_loss = float(((val_pred - val_y) ** 2).sum()
                                 / val_x.shape[0])
                curves.append({"head": k, "step": step, "train_loss": loss,
                               "val_loss": val_loss})
    return curves


def _val_pairs(compiled, pairs, cap, seed):
    if len(pairs) == 0:
        raise ValueError("validation split has no usable windows")
    if len(pairs) > cap:
        idx = np.random.default_rng(seed).choice(len(pairs), cap,
                                                 replace=False)
        pairs = pairs[np.sort(idx)]
    return pairs


def train_bc(ensemble: BCPolicyEnsemble, train_episodes, val_episodes,
             seed: int, weights=(1.0, 0.1, 1.0), steps=None):
    """Per-head action regression; returns loss-curve rows."""
    cfg = ensemble.cfg
    steps = cfg.train_steps if steps is None else steps
    if steps <= 0:
        return []
    compiled = CompiledWindows(train_episodes, ensemble.norm,
                               cfg.history_len, weights)
    pairs = compiled.pairs()
    val = CompiledWindows(val_episodes, ensemble.norm, cfg.history_len,
                          weights)
    vb = val.window_batch(_val_pairs(val, val.pairs(), cfg.val_batch_cap,
                                     seed))
    val_x = ensemble.features(vb["obs_window"], vb["prev_actions"])
    val_y = vb["action"]

    def make_batch(rng):
        idx = rng.integers(len(pairs), size=cfg.batch_size)
        b = compiled.window_batch(pairs[idx])
        return (ensemble.features(b["obs_window"], b["prev_actions"]),
                b["action"])

    return _run_regression(ensemble, make_batch, val_x, val_y, seed, steps)


def train_value(ensemble: ValueEnsemble, train_episodes, val_episodes,
                seed: int, weights=(1.0, 0.1, 1.0), steps=None):
    """Per-head return regression against z-scored H-step sums."""
    cfg = ensemble.cfg
    steps = cfg.train_steps if steps is None else steps
    if steps <= 0:
        return []
    compiled = CompiledWindows(train_episodes, ensemble.norm,
                               cfg.history_len, weights)
    pairs = compiled.pairs(value_horizon=cfg.horizon)
    if len(pairs) == 0:
        raise ValueError(
            f"no training episode is >= {cfg.horizon} steps long")
    targets = compiled.value_batch(pairs, cfg.horizon)["target"]
    ensemble.target_mean = float(targets.mean())
    ensemble.target_std = float(max(targets.std(), STD_FLOOR))

    val = CompiledWindows(val_episodes, ensemble.norm, cfg.history_len,
                          weights)
    vp = _val_pairs(val, val.pairs(value_horizon=cfg.horizon),
                    cfg.val_batch_cap, seed)
    vb = val.value_batch(vp, cfg.horizon)
    val_x = ensemble.features(vb["obs_window"], vb["prev_actions"])
    val_y = ((vb["target"] - ensemble.target_mean)
             / ensemble.target_std)[:, None]

    def make_batch(rng):
        idx = rng.integers(len(pairs), size=cfg.batch_size)
        b = compiled.value_batch(pairs[idx], cfg.horizon)
        y = ((b["target"] - ensemble.target_mean)
             / ensemble.target_std)[:, None]
        return ensemble.features(b["obs_window"], b["prev_actions"]), y

    return _run_regression(ensemble, make_batch, val_x, val_y, seed, steps)
