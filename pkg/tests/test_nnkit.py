"""Unit tests for the MLP core: forward/backward, Adam, Gaussians, checkpoints."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from umbrella import nnkit
from umbrella.nnkit import (
    DiagonalGaussian,
    Network,
    NetworkSpec,
    ParameterBundle,
    adam_step,
    clamp_log_std,
    finite_difference,
    gaussian_kl,
    gradient_rel_error,
    reparameterize,
)


def reference_forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Naive per-neuron loop forward, independent of the vectorized path."""
    h = [float(v) for v in x]
    widths = net.spec.layer_widths
    for i in range(net.spec.n_layers):
        w, b = net.params.weights[i], net.params.biases[i]
        out = []
        for j in range(widths[i + 1]):
            acc = float(b[j])
            for k in range(widths[i]):
                acc += h[k] * float(w[k, j])
            out.append(acc)
        if i < net.spec.n_layers - 1:
            name = net.spec.activation[i]
            if name == "tanh":
                out = [float(np.tanh(v)) for v in out]
            elif name == "relu":
                out = [max(v, 0.0) for v in out]
        h = out
    return np.array(h)


class TestSpecValidation:
    def test_needs_two_widths(self):
        with pytest.raises(ValueError):
            NetworkSpec((4,))

    def test_rejects_unknown_activation(self):
        with pytest.raises(ValueError):
            NetworkSpec((4, 4), activation="sigmoid")

    def test_rejects_bad_dropout(self):
        with pytest.raises(ValueError):
            NetworkSpec((4, 4), dropout_rate=1.0)

    def test_activation_broadcasts_per_hidden_layer(self):
        spec = NetworkSpec((4, 8, 8, 2), activation="relu")
        assert spec.activation == ("relu", "relu")


class TestForward:
    def test_zero_weights_give_zero_output(self):
        spec = NetworkSpec((3, 5, 2))
        net = Network.init(spec, 0)
        for w in net.params.weights:
            w[...] = 0.0
        assert np.array_equal(net.forward(np.ones(3)), np.zeros(2))

    def test_single_linear_layer_is_matmul(self):
        spec = NetworkSpec((4, 3), activation="linear")
        net = Network.init(spec, 1)
        x = np.arange(4.0)
        want = x @ net.params.weights[0] + net.params.biases[0]
        assert np.array_equal(net.forward(x), want)

    def test_matches_loop_reference(self):
        net = Network.init(NetworkSpec((3, 4, 2)), 7)
        rng = np.random.default_rng(3)
        for _ in range(5):
            x = rng.normal(size=3)
            assert np.allclose(net.forward(x), reference_forward(net, x),
                               atol=1e-12, rtol=0)

    def test_batched_rows_match_single(self):
        net = Network.init(NetworkSpec((3, 6, 2), activation="relu"), 5)
        xs = np.random.default_rng(0).normal(size=(8, 3))
        batched = net.forward(xs)
        for i in range(8):
            assert np.allclose(batched[i], net.forward(xs[i]), atol=1e-12)

    def test_width_mismatch_raises(self):
        net = Network.init(NetworkSpec((3, 2)), 0)
        with pytest.raises(ValueError):
            net.forward(np.ones(4))

    def test_inference_is_pure(self):
        net = Network.init(NetworkSpec((3, 4, 2), dropout_rate=0.5), 2)
        x = np.ones(3)
        a = net.forward(x)
        b = net.forward(x)
        assert np.array_equal(a, b)


class TestDropout:
    def test_train_mode_scales_survivors(self):
        p = 0.5
        net = Network.init(NetworkSpec((2, 2000, 1), dropout_rate=p), 0)
        _, tape = net.forward_tape(np.ones(2), train=True,
                                   rng=np.random.default_rng(0))
        mask = tape.masks[0]
        kept = mask[mask > 0]
        assert np.allclose(kept, 1.0 / (1.0 - p))
        # Survivor fraction close to 1 - p.
        assert abs(mask.astype(bool).mean() - (1 - p)) < 0.05

    def test_train_without_rng_raises(self):
        net = Network.init(NetworkSpec((2, 4, 1), dropout_rate=0.3), 0)
        with pytest.raises(ValueError):
            net.forward(np.ones(2), train=True)

    def test_zero_rate_train_equals_eval(self):
        net = Network.init(NetworkSpec((2, 4, 1)), 0)
        x = np.ones(2)
        assert np.array_equal(
            net.forward(x, train=True, rng=np.random.default_rng(0)),
            net.forward(x),
        )


class TestBackward:
    def test_chain_rule_closed_form(self):
        # y = w2 * tanh(w1 * x + b1) + b2, scalar everywhere.
        net = Network.init(NetworkSpec((1, 1, 1)), 0)
        w1, b1 = 0.7, 0.1
        w2, b2 = -1.3, 0.4
        net.params.weights[0][...] = w1
        net.params.biases[0][...] = b1
        net.params.weights[1][...] = w2
        net.params.biases[1][...] = b2
        x = 0.6
        y, tape = net.forward_tape(np.array([x]))
        h = np.tanh(w1 * x + b1)
        assert np.isclose(y[0], w2 * h + b2, atol=1e-15)
        grads, gx = net.backward(tape, np.array([1.0]))
        dh = 1.0 - h * h
        assert np.isclose(grads.weights[1][0, 0], h, atol=1e-15)
        assert np.isclose(grads.biases[1][0], 1.0, atol=1e-15)
        assert np.isclose(grads.weights[0][0, 0], w2 * dh * x, atol=1e-15)
        assert np.isclose(grads.biases[0][0], w2 * dh, atol=1e-15)
        assert np.isclose(gx[0], w2 * dh * w1, atol=1e-15)

    def test_zero_upstream_gives_zero_grads(self):
        net = Network.init(NetworkSpec((3, 5, 2)), 1)
        _, tape = net.forward_tape(np.ones(3))
        grads, gx = net.backward(tape, np.zeros(2))
        assert all(np.all(w == 0) for w in grads.weights)
        assert all(np.all(b == 0) for b in grads.biases)
        assert np.all(gx == 0)

    def test_backward_without_tape_raises(self):
        net = Network.init(NetworkSpec((3, 2)), 0)
        with pytest.raises(ValueError):
            net.backward(None, np.zeros(2))

    def test_finite_difference_params(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            act = ["tanh", "relu", "linear"][seed % 3]
            net = Network.init(NetworkSpec((3, 5, 4, 2), activation=act), seed)
            x = rng.normal(size=(4, 3))
            target = rng.normal(size=(4, 2))

            def loss_of(vec):
                probe = Network.init(net.spec, 0)
                probe.params.load_vector(vec)
                y = probe.forward(x)
                return float(((y - target) ** 2).sum())

            y, tape = net.forward_tape(x)
            grads, _ = net.backward(tape, 2.0 * (y - target))
            numeric = finite_difference(loss_of, net.params.to_vector())
            assert gradient_rel_error(grads.to_vector(), numeric) < 1e-5

    def test_finite_difference_input(self):
        net = Network.init(NetworkSpec((3, 6, 2)), 3)
        x0 = np.random.default_rng(1).normal(size=3)

        def loss_of(x):
            return float((net.forward(x) ** 2).sum())

        y, tape = net.forward_tape(x0)
        _, gx = net.backward(tape, 2.0 * y)
        numeric = finite_difference(loss_of, x0)
        assert gradient_rel_error(gx, numeric) < 1e-8

    def test_batch_grads_sum_over_rows(self):
        net = Network.init(NetworkSpec((2, 3, 1)), 4)
        xs = np.random.default_rng(2).normal(size=(5, 2))
        y, tape = net.forward_tape(xs)
        grads, _ = net.backward(tape, np.ones_like(y))
        acc = None
        for i in range(5):
            yi, ti = net.forward_tape(xs[i])
            gi, _ = net.backward(ti, np.ones(1))
            acc = gi if acc is None else acc.add_(gi)
        assert np.allclose(grads.to_vector(), acc.to_vector(), atol=1e-12)


class TestAdam:
    def test_first_step_closed_form(self):
        spec = NetworkSpec((1, 1), activation="linear")
        params = ParameterBundle.init(spec, 0)
        w0 = params.weights[0].copy()
        g = 0.25
        grads = nnkit.Gradients([np.full((1, 1), g)], [np.zeros(1)])
        adam_step(params, grads, lr=1e-3)
        # After one step m_hat = g, v_hat = g^2.
        want = w0 - 1e-3 * g / (abs(g) + nnkit.ADAM_EPS)
        assert np.allclose(params.weights[0], want, atol=1e-15)
        assert params.step == 1

    def test_zero_gradient_is_fixed_point(self):
        params = ParameterBundle.init(NetworkSpec((3, 2)), 1)
        w0 = params.weights[0].copy()
        grads = nnkit.Gradients.zeros_like(params)
        adam_step(params, grads)
        assert np.array_equal(params.weights[0], w0)

    def test_default_learning_rate(self):
        assert nnkit.DEFAULT_LEARNING_RATE == 1e-4

    def test_nonfinite_gradient_raises_named_error(self):
        params = ParameterBundle.init(NetworkSpec((2, 2)), 0)
        grads = nnkit.Gradients.zeros_like(params)
        grads.weights[0][0, 0] = np.nan
        with pytest.raises(nnkit.NumericError, match="layer0.weight"):
            adam_step(params, grads)

    def test_descends_quadratic(self):
        params = ParameterBundle.init(NetworkSpec((1, 1), activation="linear"), 0)
        params.weights[0][...] = 5.0
        for _ in range(2000):
            g = 2.0 * params.weights[0]
            adam_step(params, nnkit.Gradients([g.copy()], [np.zeros(1)]), lr=1e-2)
        assert abs(params.weights[0][0, 0]) < 1e-2


class TestGaussians:
    def test_kl_self_is_zero(self):
        q = DiagonalGaussian(np.array([0.3, -1.0]), np.array([0.1, -0.2]))
        assert abs(gaussian_kl(q, q)) < 1e-12

    def test_kl_mean_shift_closed_form(self):
        # Unit variances: KL = ||mu_q - mu_p||^2 / 2.
        q = DiagonalGaussian(np.array([1.0, 2.0]), np.zeros(2))
        p = DiagonalGaussian(np.zeros(2), np.zeros(2))
        assert np.isclose(gaussian_kl(q, p), (1.0 + 4.0) / 2.0, atol=1e-12)

    def test_kl_matches_monte_carlo(self):
        rng = np.random.default_rng(0)
        q = DiagonalGaussian(rng.normal(size=3), rng.uniform(-0.5, 0.5, 3))
        p = DiagonalGaussian(rng.normal(size=3), rng.uniform(-0.5, 0.5, 3))
        n = 200_000
        z = q.mean + np.exp(q.log_std) * rng.standard_normal((n, 3))

        def logpdf(d, z):
            var = np.exp(2.0 * d.log_std)
            return (-0.5 * ((z - d.mean) ** 2 / var)
                    - d.log_std - 0.5 * np.log(2 * np.pi)).sum(axis=-1)

        mc = float(np.mean(logpdf(q, z) - logpdf(p, z)))
        assert abs(mc - gaussian_kl(q, p)) / abs(gaussian_kl(q, p)) < 0.05

    def test_kl_batched(self):
        q = DiagonalGaussian(np.zeros((4, 3)), np.zeros((4, 3)))
        p = DiagonalGaussian(np.ones((4, 3)), np.zeros((4, 3)))
        out = gaussian_kl(q, p)
        assert out.shape == (4,)
        assert np.allclose(out, 1.5)

    @given(
        mu=st.lists(st.floats(-5, 5), min_size=1, max_size=4),
        ls_q=st.lists(st.floats(-2, 2), min_size=1, max_size=4),
        ls_p=st.lists(st.floats(-2, 2), min_size=1, max_size=4),
    )
    @settings(max_examples=200, deadline=None)
    def test_kl_nonnegative(self, mu, ls_q, ls_p):
        d = min(len(mu), len(ls_q), len(ls_p))
        q = DiagonalGaussian(np.array(mu[:d]), np.array(ls_q[:d]))
        p = DiagonalGaussian(np.zeros(d), np.array(ls_p[:d]))
        assert gaussian_kl(q, p) >= -1e-12

    def test_reparameterize_degenerate_returns_mean(self):
        q = DiagonalGaussian(np.array([2.0, -3.0]), np.array([-np.inf, -np.inf]))
        z = reparameterize(q, np.random.default_rng(0))
        assert np.array_equal(z, q.mean)

    def test_reparameterize_seed_reproducible(self):
        q = DiagonalGaussian(np.zeros(4), np.zeros(4))
        a = reparameterize(q, np.random.default_rng(9))
        b = reparameterize(q, np.random.default_rng(9))
        assert np.array_equal(a, b)

    def test_reparameterize_moments(self):
        q = DiagonalGaussian(np.full(2, 1.5), np.log(np.full(2, 0.5)))
        rng = np.random.default_rng(0)
        zs = np.stack([reparameterize(q, rng) for _ in range(20_000)])
        assert np.allclose(zs.mean(axis=0), 1.5, atol=0.02)
        assert np.allclose(zs.std(axis=0), 0.5, atol=0.02)

    def test_clamp_log_std(self):
        raw = np.array([-10.0, 0.0, 5.0])
        clipped, interior = clamp_log_std(raw)
        assert np.array_equal(clipped, [nnkit.LOG_STD_MIN, 0.0, nnkit.LOG_STD_MAX])
        assert np.array_equal(interior, [0.0, 1.0, 0.0])


class TestInit:
    def test_glorot_bounds(self):
        spec = NetworkSpec((10, 20, 3))
        params = ParameterBundle.init(spec, 0)
        for w, fi, fo in zip(params.weights, (10, 20), (20, 3)):
            bound = np.sqrt(6.0 / (fi + fo))
            assert np.all(np.abs(w) <= bound)
            assert np.abs(w).max() > 0.5 * bound  # actually fills the range
        assert all(np.all(b == 0) for b in params.biases)

    def test_seeds_differ(self):
        spec = NetworkSpec((4, 4))
        a = ParameterBundle.init(spec, 0)
        b = ParameterBundle.init(spec, 1)
        assert not np.array_equal(a.weights[0], b.weights[0])

    def test_same_seed_identical(self):
        spec = NetworkSpec((4, 4))
        a = ParameterBundle.init(spec, 3)
        b = ParameterBundle.init(spec, 3)
        assert np.array_equal(a.weights[0], b.weights[0])


class TestVectorRoundTrip:
    def test_to_from_vector(self):
        params = ParameterBundle.init(NetworkSpec((3, 5, 2)), 0)
        vec = params.to_vector()
        clone = ParameterBundle.init(NetworkSpec((3, 5, 2)), 1)
        clone.load_vector(vec)
        assert np.array_equal(clone.to_vector(), vec)

    def test_wrong_size_raises(self):
        params = ParameterBundle.init(NetworkSpec((3, 2)), 0)
        with pytest.raises(ValueError):
            params.load_vector(np.zeros(3))


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        net = Network.init(NetworkSpec((6, 8, 3), dropout_rate=0.1), 42)
        # Dirty the Adam state so the full bundle is exercised.
        g = nnkit.Gradients([np.full_like(w, 0.1) for w in net.params.weights],
                            [np.full_like(b, 0.1) for b in net.params.biases])
        adam_step(net.params, g)
        path = str(tmp_path / "net.json")
        nnkit.save_checkpoint(path, "network", net.state())
        loaded = Network.from_state(nnkit.load_checkpoint(path, "network"))
        assert loaded.spec == net.spec
        for a, b in zip(loaded.params.weights, net.params.weights):
            assert np.array_equal(a, b)
        for a, b in zip(loaded.params.m_w, net.params.m_w):
            assert np.array_equal(a, b)
        assert loaded.params.step == net.params.step

    def test_kind_mismatch_raises(self, tmp_path):
        path = str(tmp_path / "x.json")
        nnkit.save_checkpoint(path, "network", {"a": 1})
        with pytest.raises(ValueError, match="kind"):
            nnkit.load_checkpoint(path, "ensemble")

    def test_version_mismatch_raises(self, tmp_path):
        path = str(tmp_path / "x.json")
        with open(path, "w") as fh:
            fh.write('{"version": 999, "kind": "network", "payload": {}}')
        with pytest.raises(ValueError, match="version"):
            nnkit.load_checkpoint(path, "network")
