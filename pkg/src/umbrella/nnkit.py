"""Double-precision MLP core.

Fixed-topology multilayer perceptrons on numpy with explicit gradient
tapes, Adam updates, diagonal Gaussians (KL, reparameterized sampling),
finite-difference checking, and versioned JSON checkpoints. Everything
runs in float64; the learning code elsewhere in the package is built
out of these pieces and nothing else.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "tanh", "linear")

# Convention for every network that emits a log-std: clamp before exp.
LOG_STD_MIN = -7.0
LOG_STD_MAX = 2.0

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DEFAULT_LEARNING_RATE = 1e-4

CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    """A gradient or update stopped being finite."""


def as_rng(seed) -> np.random.Generator:
    """Coerce an int seed, SeedSequence, or Generator into a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ── Specs and parameters ────────────────────────────────────────────────────


@dataclass(frozen=True)
class NetworkSpec:
    """Topology of one MLP.

    layer_widths includes input and output widths; hidden layers apply
    `activation` (a single name, or one name per hidden layer) followed
    by inverted dropout at `dropout_rate` when training. The output
    layer is always linear and never dropped.
    """

    layer_widths: tuple[int, ...]
    activation: str | tuple[str, ...] = "tanh"
    dropout_rate: float = 0.0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("layer_widths needs at least input and output")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        n_hidden = len(widths) - 2
        act = self.activation
        named = (act,) if isinstance(act, str) else tuple(act)
        for a in named:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        acts = (act,) * n_hidden if isinstance(act, str) else named
        if len(acts) != n_hidden:
            raise ValueError(
                f"{len(acts)} activations for {n_hidden} hidden layers"
            )
        object.__setattr__(self, "activation", acts)
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1


class ParameterBundle:
    """Weights, biases, and Adam moments for one network."""

    def __init__(self, weights, biases, m_w=None, v_w=None, m_b=None,
                 v_b=None, step=0):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        zw = lambda: [np.zeros_like(w) for w in self.weights]
        zb = lambda: [np.zeros_like(b) for b in self.biases]
        self.m_w = [np.asarray(a, dtype=np.float64) for a in m_w] if m_w else zw()
        self.v_w = [np.asarray(a, dtype=np.float64) for a in v_w] if v_w else zw()
        self.m_b = [np.asarray(a, dtype=np.float64) for a in m_b] if m_b else zb()
        self.v_b = [np.asarray(a, dtype=np.float64) for a in v_b] if v_b else zb()
        self.step = int(step)

    @classmethod
    def init(cls, spec: NetworkSpec, seed) -> "ParameterBundle":
        """Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases."""
        rng = as_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(spec.layer_widths, spec.layer_widths[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    def copy(self) -> "ParameterBundle":
        return ParameterBundle(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases],
            [a.copy() for a in self.m_w], [a.copy() for a in self.v_w],
            [a.copy() for a in self.m_b], [a.copy() for a in self.v_b],
            self.step,
        )

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def to_vector(self) -> np.ndarray:
        """Flatten weights then biases into one vector (Adam state excluded)."""
        parts = [w.ravel() for w in self.weights] + [b.ravel() for b in self.biases]
        return np.concatenate(parts)

    def load_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise ValueError(f"expected {self.n_params} values, got {vec.size}")
        i = 0
        for w in self.weights:
            w[...] = vec[i:i + w.size].reshape(w.shape)
            i += w.size
        for b in self.biases:
            b[...] = vec[i:i + b.size].reshape(b.shape)
            i += b.size


@dataclass
class Gradients:
    """Per-layer parameter gradients, same shapes as the bundle."""

    weights: list
    biases: list

    @classmethod
    def zeros_like(cls, params: ParameterBundle) -> "Gradients":
        return cls([np.zeros_like(w) for w in params.weights],
                   [np.zeros_like(b) for b in params.biases])

    def add_(self, other: "Gradients") -> "Gradients":
        for a, b in zip(self.weights, other.weights):
            a += b
        for a, b in zip(self.biases, other.biases):
            a += b
        return self

    def to_vector(self) -> np.ndarray:
        parts = [w.ravel() for w in self.weights] + [b.ravel() for b in self.biases]
        return np.concatenate(parts)


# ── Forward / backward ──────────────────────────────────────────────────────


@dataclass
class Tape:
    """Intermediates recorded by forward_tape, consumed once by backward."""

    layer_inputs: list
    pre_acts: list
    masks: list
    train: bool
    squeeze: bool


def _activate(name: str, h: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(h, 0.0)
    if name == "tanh":
        return np.tanh(h)
    return h


def _activate_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (pre > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - post * post
    return np.ones_like(pre)


class Network:
    """One MLP: spec plus parameters.

    forward is pure (reentrant on a shared parameter snapshot); training
    passes record a Tape via forward_tape and feed it to backward, which
    returns summed-over-batch parameter gradients and the input gradient.
    """

    def __init__(self, spec: NetworkSpec, params: ParameterBundle):
        if [w.shape for w in params.weights] != [
            (i, o) for i, o in zip(spec.layer_widths, spec.layer_widths[1:])
        ]:
            raise ValueError("parameter shapes do not match spec")
        self.spec = spec
        self.params = params

    @classmethod
    def init(cls, spec: NetworkSpec, seed) -> "Network":
        return cls(spec, ParameterBundle.init(spec, seed))

    def _run(self, x, train, rng, record):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x.reshape(1, -1) if squeeze else x
        if h.ndim != 2 or h.shape[1] != self.spec.in_dim:
            raise ValueError(
                f"input of width {h.shape[-1]} fed to net expecting "
                f"{self.spec.in_dim}"
            )
        p = self.spec.dropout_rate
        if train and p > 0.0 and rng is None:
            raise ValueError("training forward with dropout needs an rng")
        inputs, pres, masks = [], [], []
        n_layers = self.spec.n_layers
        for i in range(n_layers):
            inputs.append(h)
            pre = h @ self.params.weights[i] + self.params.biases[i]
            if i < n_layers - 1:
                act = self.spec.activation[i]
                h = _activate(act, pre)
                if train and p > 0.0:
                    mask = (rng.random(h.shape) >= p) / (1.0 - p)
                    h = h * mask
                else:
                    mask = None
            else:
                h = pre
                mask = None
            pres.append(pre)
            masks.append(mask)
        y = h[0] if squeeze else h
        if not record:
            return y, None
        return y, Tape(inputs, pres, masks, train, squeeze)

    def forward(self, x, train: bool = False, rng=None) -> np.ndarray:
        y, _ = self._run(x, train, rng, record=False)
        return y

    def forward_tape(self, x, train: bool = False, rng=None):
        return self._run(x, train, rng, record=True)

    def backward(self, tape: Tape, grad_out):
        """Backprop grad_out through a recorded pass.

        Returns (Gradients summed over the batch, gradient w.r.t. the input).
        """
        if tape is None:
            raise ValueError("backward called without a recorded forward tape")
        g = np.asarray(grad_out, dtype=np.float64)
        if tape.squeeze:
            g = g.reshape(1, -1)
        if g.shape != tape.pre_acts[-1].shape:
            raise ValueError(
                f"upstream gradient shape {g.shape} does not match output "
                f"{tape.pre_acts[-1].shape}"
            )
        grads = Gradients.zeros_like(self.params)
        n_layers = self.spec.n_layers
        for i in range(n_layers - 1, -1, -1):
            if i < n_layers - 1:
                if tape.masks[i] is not None:
                    g = g * tape.masks[i]
                act = self.spec.activation[i]
                post = _activate(act, tape.pre_acts[i])
                g = g * _activate_grad(act, tape.pre_acts[i], post)
            grads.weights[i][...] = tape.layer_inputs[i].T @ g
            grads.biases[i][...] = g.sum(axis=0)
            g = g @ self.params.weights[i].T
        grad_x = g[0] if tape.squeeze else g
        return grads, grad_x

    def state(self) -> dict:
        return {
            "layer_widths": list(self.spec.layer_widths),
            "activation": list(self.spec.activation),
            "dropout_rate": self.spec.dropout_rate,
            "weights": [w for w in self.params.weights],
            "biases": [b for b in self.params.biases],
            "m_w": [a for a in self.params.m_w],
            "v_w": [a for a in self.params.v_w],
            "m_b": [a for a in self.params.m_b],
            "v_b": [a for a in self.params.v_b],
            "step": self.params.step,
        }

    @classmethod
    def from_state(cls, d: dict) -> "Network":
        spec = NetworkSpec(
            tuple(d["layer_widths"]), tuple(d["activation"]), d["dropout_rate"]
        )
        params = ParameterBundle(
            d["weights"], d["biases"], d["m_w"], d["v_w"], d["m_b"], d["v_b"],
            d["step"],
        )
        return cls(spec, params)


def adam_step(params: ParameterBundle, grads: Gradients,
              lr: float = DEFAULT_LEARNING_RATE, beta1: float = ADAM_BETA1,
              beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> None:
    """One in-place Adam update with bias correction."""
    for i, g in enumerate(grads.weights):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for layer{i}.weight")
    for i, g in enumerate(grads.biases):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for layer{i}.bias")
    t = params.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in (
        list(zip(params.weights, grads.weights, params.m_w, params.v_w))
        + list(zip(params.biases, grads.biases, params.m_b, params.v_b))
    ):
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    params.step = t


# ── Diagonal Gaussians ──────────────────────────────────────────────────────


@dataclass
class DiagonalGaussian:
    """Mean and log-std arrays of matching shape; last axis is the event."""

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_std = np.asarray(self.log_std, dtype=np.float64)
        if self.mean.shape != self.log_std.shape:
            raise ValueError("mean and log_std shapes differ")

    @classmethod
    def standard(cls, shape) -> "DiagonalGaussian":
        return cls(np.zeros(shape), np.zeros(shape))


def gaussian_kl(q: DiagonalGaussian, p: DiagonalGaussian) -> np.ndarray:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    if q.mean.shape != p.mean.shape:
        raise ValueError("distributions have mismatched shapes")
    var_q = np.exp(2.0 * q.log_std)
    var_p = np.exp(2.0 * p.log_std)
    per_dim = (
        p.log_std - q.log_std
        + (var_q + (q.mean - p.mean) ** 2) / (2.0 * var_p)
        - 0.5
    )
    return per_dim.sum(axis=-1)


def reparameterize(q: DiagonalGaussian, rng) -> np.ndarray:
    """Sample mean + exp(log_std) * eps with eps ~ N(0, I)."""
    eps = as_rng(rng).standard_normal(q.mean.shape)
    return q.mean + np.exp(q.log_std) * eps


def clamp_log_std(raw: np.ndarray):
    """Clip raw log-std to [LOG_STD_MIN, LOG_STD_MAX]; also return the
    interior mask so backward passes can zero gradients at the clamp."""
    clipped = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    interior = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
    return clipped, interior.astype(np.float64)


# ── Gradient checking ───────────────────────────────────────────────────────


def finite_difference(f, x0: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar f at x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        grad.flat[i] = (f(xp) - f(xm)) / (2.0 * eps)
    return grad


def gradient_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max per-coordinate |a - n| / max(|a| + |n|, 1e-6)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.abs(a) + np.abs(n), 1e-6)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


# ── Checkpoints ─────────────────────────────────────────────────────────────


def _encode(obj):
    if isinstance(obj, np.ndarray):
        return {"__array__": list(obj.shape), "dtype": str(obj.dtype),
                "data": obj.ravel().tolist()}
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    return obj


def _decode(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            arr = np.asarray(obj["data"], dtype=obj["dtype"])
            return arr.reshape(obj["__array__"])
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj


def save_checkpoint(path: str, kind: str, payload: dict) -> None:
    """Write a versioned JSON checkpoint. Floats round-trip bit-exact."""
    body = {"version": CHECKPOINT_VERSION, "kind": kind,
            "payload": _encode(payload)}
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(body, fh, allow_nan=False)
    os.replace(tmp, path)


def load_checkpoint(path: str, kind: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        body = json.load(fh)
    if body.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version {body.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    if body.get("kind") != kind:
        raise ValueError(f"checkpoint kind {body.get('kind')!r}, wanted {kind!r}")
    return _decode(body["payload"])
