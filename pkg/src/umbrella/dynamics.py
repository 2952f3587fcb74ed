"""Bootstrap ensemble of action-conditioned stochastic dynamics heads.

Each head is a conditional VAE over history windows: an encoder maps
the flattened observation window plus the current action to an
embedding, a posterior network maps the (current, next) window pair to
a diagonal Gaussian over the latent z, and a decoder maps (embedding,
z) to a next-frame delta and a reward estimate. Predictions are
residual: the decoder output is added to the last window frame.

Heads train in two phases. Phase one is deterministic (z = 0, no KL
term); phase two adds the latent pathway with a freshly initialized
posterior, latent dropout, and the KL penalty. Both phases unroll the
model several steps, feeding its own frame predictions forward while
teacher-forcing the logged actions.

All losses here return explicit gradients; backprop through the unroll
is hand-rolled (the window roll, the residual connection, the
reparameterized latent, and the log-std clamp all accumulate into one
backward sweep) and is validated against finite differences in the
test suite.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import CompiledWindows, NormStats
from .nnkit import (
    DiagonalGaussian,
    Gradients,
    Network,
    NetworkSpec,
    NumericError,
    adam_step,
    as_rng,
    clamp_log_std,
    gaussian_kl,
    load_checkpoint,
    save_checkpoint,
)

DETERMINISTIC = "deterministic"
STOCHASTIC = "stochastic"
DIVERGENCE_FACTOR = 1e3


@dataclass(frozen=True)
class LatentConfig:
    """Latent pathway knobs: prior is N(0, I_latent_dim)."""

    latent_dim: int = 8
    kl_weight: float = 0.1
    latent_dropout: float = 0.5

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.kl_weight <= 0:
            raise ValueError("kl_weight must be positive")
        if not 0.0 <= self.latent_dropout <= 1.0:
            raise ValueError("latent_dropout must lie in [0, 1]")


@dataclass(frozen=True)
class DynamicsConfig:
    obs_dim: int = 22
    act_dim: int = 2
    history_len: int = 20
    unroll_len: int = 5
    latent_dim: int = 8
    embed_dim: int = 32
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    dropout: float = 0.1
    kl_weight: float = 0.1
    latent_dropout: float = 0.5
    det_steps: int = 5000
    stoch_steps: int = 5000
    batch_size: int = 32
    learning_rate: float = 1e-4
    ensemble_size: int = 2
    val_interval: int = 250
    val_batch_cap: int = 1024

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if min(self.obs_dim, self.act_dim, self.history_len,
               self.unroll_len, self.embed_dim, self.batch_size) < 1:
            raise ValueError("dimensions and lengths must be >= 1")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        self.latent  # validates latent_dim / kl_weight / latent_dropout

    @property
    def latent(self) -> LatentConfig:
        return LatentConfig(self.latent_dim, self.kl_weight,
                            self.latent_dropout)

    @property
    def window_size(self) -> int:
        return self.history_len * self.obs_dim

    def encoder_spec(self) -> NetworkSpec:
        widths = (self.window_size + self.act_dim, *self.hidden,
                  self.embed_dim)
        return NetworkSpec(widths, self.activation, self.dropout)

    def posterior_spec(self) -> NetworkSpec:
        widths = (2 * self.window_size, *self.hidden, 2 * self.latent_dim)
        return NetworkSpec(widths, self.activation, self.dropout)

    def decoder_spec(self) -> NetworkSpec:
        widths = (self.embed_dim + self.latent_dim, *self.hidden,
                  self.obs_dim + 1)
        return NetworkSpec(widths, self.activation, self.dropout)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "DynamicsConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ValueError(f"unknown dynamics keys: {', '.join(unknown)}")
        return cls(**mapping)


def sample_prior(latent: LatentConfig, count: int, rng) -> np.ndarray:
    """count i.i.d. draws from the standard-normal latent prior."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return as_rng(rng).standard_normal((count, latent.latent_dim))


# ── Head ────────────────────────────────────────────────────────────────────


class DynamicsHead:
    """One CVAE dynamics model: encoder, posterior, decoder."""

    def __init__(self, cfg: DynamicsConfig, enc: Network, post: Network,
                 dec: Network, mode: str = DETERMINISTIC):
        if mode not in (DETERMINISTIC, STOCHASTIC):
            raise ValueError(f"unknown mode {mode!r}")
        self.cfg = cfg
        self.enc = enc
        self.post = post
        self.dec = dec
        self.mode = mode

    @classmethod
    def init(cls, cfg: DynamicsConfig, seed) -> "DynamicsHead":
        e, p, d = np.random.SeedSequence(seed).spawn(3)
        return cls(cfg, Network.init(cfg.encoder_spec(), e),
                   Network.init(cfg.posterior_spec(), p),
                   Network.init(cfg.decoder_spec(), d))

    def set_stochastic(self, posterior_seed) -> None:
        """Enter phase two: keep encoder/decoder, fresh posterior."""
        self.post = Network.init(self.cfg.posterior_spec(), posterior_seed)
        self.mode = STOCHASTIC

    def _flatten(self, obs_window) -> np.ndarray:
        w = np.asarray(obs_window, dtype=np.float64)
        if w.ndim == 2:
            w = w[None]
        return w.reshape(w.shape[0], -1)

    def predict_step(self, obs_window, action, z=None, train=False,
                     rng=None):
        """(next frame, reward) for a window/action batch.

        Residual form: next frame = last window frame + decoded delta.
        In deterministic mode z is ignored and replaced by zeros.
        """
        w = np.asarray(obs_window, dtype=np.float64)
        single = w.ndim == 2
        if single:
            w = w[None]
        a = np.atleast_2d(np.asarray(action, dtype=np.float64))
        B = w.shape[0]
        if self.mode == DETERMINISTIC or z is None:
            z = np.zeros((B, self.cfg.latent_dim))
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(a))
                and np.all(np.isfinite(z))):
            raise NumericError("non-finite input to predict_step")
        flat = w.reshape(B, -1)
        emb = self.enc.forward(np.concatenate([flat, a], axis=1), train, rng)
        out = self.dec.forward(np.concatenate([emb, z], axis=1), train, rng)
        delta, reward = out[:, :self.cfg.obs_dim], out[:, self.cfg.obs_dim]
        frame = w[:, -1, :] + delta
        if single:
            return frame[0], float(reward[0])
        return frame, reward

    def posterior_dist(self, obs_window, next_window) -> DiagonalGaussian:
        x = np.concatenate([self._flatten(obs_window),
                            self._flatten(next_window)], axis=1)
        out = self.post.forward(x)
        mu = out[:, :self.cfg.latent_dim]
        log_std, _ = clamp_log_std(out[:, self.cfg.latent_dim:])
        return DiagonalGaussian(mu, log_std)

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([self.enc.params.to_vector(),
                               self.post.params.to_vector(),
                               self.dec.params.to_vector()])

    def load_parameter_vector(self, vec: np.ndarray) -> None:
        n_e = self.enc.params.n_params
        n_p = self.post.params.n_params
        self.enc.params.load_vector(vec[:n_e])
        self.post.params.load_vector(vec[n_e:n_e + n_p])
        self.dec.params.load_vector(vec[n_e + n_p:])

    def state(self) -> dict:
        return {"mode": self.mode, "enc": self.enc.state(),
                "post": self.post.state(), "dec": self.dec.state()}

    @classmethod
    def from_state(cls, cfg: DynamicsConfig, d: dict) -> "DynamicsHead":
        return cls(cfg, Network.from_state(d["enc"]),
                   Network.from_state(d["post"]),
                   Network.from_state(d["dec"]), mode=d["mode"])


# ── Losses ──────────────────────────────────────────────────────────────────
#
# Randomness contract for one stochastic training step j (in order):
#   1. posterior forward dropout masks (if training with dropout),
#   2. one uniform per row  -> latent-dropout mask (row uses prior z),
#   3. one N(0,I) row draw  -> prior rows take it as z directly,
#      posterior rows reparameterize mu + sigma * eps with it,
#   4. encoder then decoder forward dropout masks.
# Evaluation mode draws nothing: no weight dropout, z = posterior mean.


def _require_batch(batch, keys):
    missing = [k for k in keys if k not in batch]
    if missing:
        raise ValueError(f"batch missing keys: {', '.join(missing)}")


def unrolled_loss(head: DynamicsHead, batch: dict, n_p: int,
                  latent: LatentConfig | None = None, rng=None,
                  train: bool = True):
    """n_p-step unrolled loss with gradients through the whole chain.

    batch: obs_window (B, n_c, d), actions (B, >=n_p, d_a),
    next_windows (B, >=n_p, n_c, d), rewards (B, >=n_p). Targets are
    the last rows of the true next windows. Returns
    (total, components, grads) with grads a dict of Gradients keyed
    enc/post/dec (post is None in deterministic mode).
    """
    _require_batch(batch, ("obs_window", "actions", "next_windows",
                           "rewards"))
    stochastic = head.mode == STOCHASTIC
    if stochastic and latent is None:
        latent = head.cfg.latent
    cfg = head.cfg
    obs_w = np.asarray(batch["obs_window"], dtype=np.float64)
    actions = np.asarray(batch["actions"], dtype=np.float64)
    next_ws = np.asarray(batch["next_windows"], dtype=np.float64)
    rewards = np.asarray(batch["rewards"], dtype=np.float64)
    if actions.shape[1] < n_p or next_ws.shape[1] < n_p:
        raise ValueError(f"window provides {next_ws.shape[1]} future steps, "
                         f"unroll needs {n_p}")
    B, n_c, d = obs_w.shape
    n_z = cfg.latent_dim
    rng = as_rng(rng) if (train and rng is not None) else rng
    if train and rng is None and (cfg.dropout > 0 or stochastic):
        raise ValueError("training-mode loss needs an rng")

    frame_sum = reward_sum = kl_sum = 0.0
    win = obs_w
    steps = []
    for j in range(n_p):
        rec = {"win": win}
        target = next_ws[:, j, -1, :]
        if stochastic:
            post_in = np.concatenate(
                [win.reshape(B, -1), next_ws[:, j].reshape(B, -1)], axis=1)
            post_out, post_tape = head.post.forward_tape(post_in, train, rng)
            mu = post_out[:, :n_z]
            log_std, interior = clamp_log_std(post_out[:, n_z:])
            sigma = np.exp(log_std)
            if train:
                use_prior = rng.random(B) < latent.latent_dropout
                eps = rng.standard_normal((B, n_z))
                z = np.where(use_prior[:, None], eps, mu + sigma * eps)
            else:
                use_prior = np.zeros(B, dtype=bool)
                eps = np.zeros((B, n_z))
                z = mu
            kl = gaussian_kl(DiagonalGaussian(mu, log_std),
                             DiagonalGaussian.standard(mu.shape))
            kl_sum += latent.kl_weight * kl.mean()
            rec.update(post_tape=post_tape, mu=mu, sigma=sigma,
                       interior=interior, use_prior=use_prior, eps=eps)
        else:
            z = np.zeros((B, n_z))
        enc_in = np.concatenate([win.reshape(B, -1), actions[:, j]], axis=1)
        emb, enc_tape = head.enc.forward_tape(enc_in, train, rng)
        out, dec_tape = head.dec.forward_tape(
            np.concatenate([emb, z], axis=1), train, rng)
        frame = win[:, -1, :] + out[:, :d]
        rhat = out[:, d]
        frame_sum += ((frame - target) ** 2).sum(axis=1).mean()
        reward_sum += ((rhat - rewards[:, j]) ** 2).mean()
        rec.update(enc_tape=enc_tape, dec_tape=dec_tape, frame=frame,
                   target=target, rhat=rhat, r=rewards[:, j])
        steps.append(rec)
        win = np.concatenate([win[:, 1:], frame[:, None, :]], axis=1)

    total = frame_sum + reward_sum + kl_sum
    components = {"frame": float(frame_sum), "reward": float(reward_sum),
                  "kl": float(kl_sum)}

    grads = {"enc": Gradients.zeros_like(head.enc.params),
             "dec": Gradients.zeros_like(head.dec.params),
             "post": Gradients.zeros_like(head.post.params)
             if stochastic else None}
    g_next = np.zeros((B, n_c, d))  # dL/d(win_{j+1}), carried backward
    for j in range(n_p - 1, -1, -1):
        rec = steps[j]
        g_win = np.zeros((B, n_c, d))
        g_win[:, 1:] += g_next[:, :-1]
        g_frame = g_next[:, -1] + (2.0 / B) * (rec["frame"] - rec["target"])
        g_reward = (2.0 / B) * (rec["rhat"] - rec["r"])
        g_out = np.concatenate([g_frame, g_reward[:, None]], axis=1)
        dec_g, g_dec_in = head.dec.backward(rec["dec_tape"], g_out)
        grads["dec"].add_(dec_g)
        g_emb = g_dec_in[:, :cfg.embed_dim]
        g_z = g_dec_in[:, cfg.embed_dim:]
        g_win[:, -1] += g_frame  # residual connection
        enc_g, g_enc_in = head.enc.backward(rec["enc_tape"], g_emb)
        grads["enc"].add_(enc_g)
        g_win += g_enc_in[:, :n_c * d].reshape(B, n_c, d)
        if stochastic:
            post_rows = (~rec["use_prior"])[:, None]
            g_mu = g_z * post_rows
            g_log = g_z * rec["sigma"] * rec["eps"] * post_rows
            # KL applies to every row regardless of the dropout draw.
            w = latent.kl_weight / B
            g_mu = g_mu + w * rec["mu"]
            g_log = g_log + w * (rec["sigma"] ** 2 - 1.0)
            g_log = g_log * rec["interior"]
            post_g, g_post_in = head.post.backward(
                rec["post_tape"], np.concatenate([g_mu, g_log], axis=1))
            grads["post"].add_(post_g)
            g_win += g_post_in[:, :n_c * d].reshape(B, n_c, d)
        g_next = g_win
    return float(total), components, grads


def elbo_loss(head: DynamicsHead, batch: dict, latent=None, rng=None,
              train: bool = True):
    """Single-step CVAE loss (frame MSE + reward MSE + weighted KL).

    Stochastic heads only; deterministic heads use mse_loss.
    """
    if head.mode != STOCHASTIC:
        raise ValueError("elbo_loss needs a stochastic head; "
                         "use mse_loss for deterministic training")
    _require_batch(batch, ("obs_window", "action", "next_window", "reward"))
    seq = {"obs_window": batch["obs_window"],
           "actions": np.asarray(batch["action"])[:, None, :],
           "next_windows": np.asarray(batch["next_window"])[:, None],
           "rewards": np.asarray(batch["reward"])[:, None]}
    return unrolled_loss(head, seq, 1, latent, rng, train)


def mse_loss(head: DynamicsHead, batch: dict, rng=None, train: bool = True):
    """Single-step deterministic loss: frame MSE + reward MSE, z = 0."""
    _require_batch(batch, ("obs_window", "action", "next_window", "reward"))
    if head.mode != DETERMINISTIC:
        raise ValueError("mse_loss is the deterministic-phase loss")
    seq = {"obs_window": batch["obs_window"],
           "actions": np.asarray(batch["action"])[:, None, :],
           "next_windows": np.asarray(batch["next_window"])[:, None],
           "rewards": np.asarray(batch["reward"])[:, None]}
    return unrolled_loss(head, seq, 1, None, rng, train)


# ── Ensemble and training ───────────────────────────────────────────────────


class DynamicsEnsemble:
    """K heads sharing architecture, data order, and NormStats."""

    def __init__(self, heads, norm: NormStats, cfg: DynamicsConfig,
                 head_seeds):
        if len(heads) != cfg.ensemble_size:
            raise ValueError("head count differs from ensemble_size")
        if len(set(head_seeds)) != len(head_seeds):
            raise ValueError("head seeds must be pairwise distinct")
        self.heads = list(heads)
        self.norm = norm
        self.cfg = cfg
        self.head_seeds = [int(s) for s in head_seeds]

    @classmethod
    def create(cls, cfg: DynamicsConfig, norm: NormStats,
               seed: int) -> "DynamicsEnsemble":
        seeds = [int(np.random.SeedSequence([seed, k]).generate_state(
            1, np.uint64)[0]) for k in range(cfg.ensemble_size)]
        heads = [DynamicsHead.init(cfg, s) for s in seeds]
        return cls(heads, norm, cfg, seeds)

    @property
    def size(self) -> int:
        return len(self.heads)

    @property
    def mode(self) -> str:
        return self.heads[0].mode

    def save(self, path: str) -> None:
        payload = {
            "config": asdict(self.cfg),
            "norm": self.norm.to_dict(),
            "head_seeds": self.head_seeds,
            "heads": [h.state() for h in self.heads],
        }
        save_checkpoint(path, "dynamics_ensemble", payload)

    @classmethod
    def load(cls, path: str) -> "DynamicsEnsemble":
        d = load_checkpoint(path, "dynamics_ensemble")
        cfg = DynamicsConfig.from_mapping(d["config"])
        heads = [DynamicsHead.from_state(cfg, h) for h in d["heads"]]
        return cls(heads, NormStats.from_dict(d["norm"]), cfg,
                   d["head_seeds"])


def _validation_pairs(compiled: CompiledWindows, n_p: int, cap: int,
                      seed: int) -> np.ndarray:
    pairs = compiled.pairs(future_len=n_p)
    if len(pairs) == 0:
        raise ValueError("validation split has no full-length windows")
    if len(pairs) > cap:
        idx = np.random.default_rng(seed).choice(len(pairs), cap,
                                                 replace=False)
        pairs = pairs[np.sort(idx)]
    return pairs


def train_dynamics(ensemble: DynamicsEnsemble, train_episodes, val_episodes,
                   seed: int, weights=(1.0, 0.1, 1.0), det_steps=None,
                   stoch_steps=None, progress=None):
    """Two-phase training of every head; returns loss-curve rows.

    Phase one runs `det_steps` deterministic updates; phase two flips
    each head to stochastic mode with a fresh posterior and runs
    `stoch_steps` more. Heads see identical batch sequences but use
    per-head parameter and noise seeds. A zero-length schedule leaves
    the ensemble untouched (including its mode). Divergence (loss
    above 1e3 x the initial loss, or non-finite) aborts.
    """
    cfg = ensemble.cfg
    det_steps = cfg.det_steps if det_steps is None else det_steps
    stoch_steps = cfg.stoch_steps if stoch_steps is None else stoch_steps
    n_p = cfg.unroll_len
    compiled = CompiledWindows(train_episodes, ensemble.norm,
                               cfg.history_len, weights)
    pairs = compiled.pairs(future_len=n_p)
    if len(pairs) == 0:
        raise ValueError("training split has no full-length windows")
    val = CompiledWindows(val_episodes, ensemble.norm, cfg.history_len,
                          weights)
    val_batch = val.sequence_batch(
        _validation_pairs(val, n_p, cfg.val_batch_cap, seed), n_p)

    curves = []
    for k, head in enumerate(ensemble.heads):
        batch_rng = np.random.default_rng(
            np.random.SeedSequence([seed, 101]))  # shared order across heads
        noise_rng = np.random.default_rng(np.random.SeedSequence(
            [seed, 202, k]))
        phases = [(DETERMINISTIC, det_steps)]
        if stoch_steps > 0:
            phases.append((STOCHASTIC, stoch_steps))
        for phase, steps in phases:
            if steps <= 0:
                continue
            if phase == STOCHASTIC and head.mode != STOCHASTIC:
                head.set_stochastic(np.random.SeedSequence([seed, 303, k]))
            initial = None
            for step in range(steps):
                idx = batch_rng.integers(len(pairs), size=cfg.batch_size)
                batch = compiled.sequence_batch(pairs[idx], n_p)
                loss, comps, grads = unrolled_loss(head, batch, n_p,
                                                   rng=noise_rng)
                if initial is None:
                    initial = max(loss, 1e-8)
                if not np.isfinite(loss) or loss > DIVERGENCE_FACTOR * initial:
                    raise RuntimeError(
                        f"dynamics head {k} diverged in {phase} phase at "
                        f"step {step}: loss {loss:.4g} vs initial "
                        f"{initial:.4g}"
                    )
                adam_step(head.enc.params, grads["enc"], cfg.learning_rate)
                adam_step(head.dec.params, grads["dec"], cfg.learning_rate)
                if grads["post"] is not None:
                    adam_step(head.post.params, grads["post"],
                              cfg.learning_rate)
                if step % cfg.val_interval == 0 or step == steps - 1:
                    v_loss, v_comps, _ = unrolled_loss(head, val_batch, n_p,
                                                       train=False)
                    curves.append({
                        "head": k, "phase": phase, "step": step,
                        "train_loss": loss, "val_loss": v_loss,
                        "frame": v_comps["frame"],
                        "reward": v_comps["reward"], "kl": v_comps["kl"],
                    })
                    if progress is not None:
                        progress(curves[-1])
    return curves
