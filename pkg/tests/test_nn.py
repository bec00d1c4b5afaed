"""Feed-forward substrate: forward/backward correctness, Adam, serialization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moboflow.nn import (AdamState, DimensionError, FeedForwardNet,
                         NumericError, adam_step, clip_global_norm,
                         leaky_relu, load_params, save_params)
from tests.conftest import assert_grads_close, central_diff


def small_net(rng, sizes=(3, 5, 2), final_nonlinear=False):
    return FeedForwardNet.init(list(sizes), rng, final_nonlinear=final_nonlinear)


class TestForward:
    def test_zero_weight_net_maps_to_zero(self, rng):
        net = small_net(rng)
        net.set_flat_params(np.zeros(net.n_params))
        assert np.allclose(net.forward(np.array([1.0, -2.0, 3.0])), 0.0)

    def test_identity_single_layer(self):
        net = FeedForwardNet([2, 2], [np.eye(2)], [np.zeros(2)])
        out = net.forward(np.array([1.0, 2.0]))
        assert np.allclose(out, [1.0, 2.0])

    def test_matches_straight_line_hand_computation(self, rng):
        net = small_net(rng)
        x = rng.standard_normal(3)
        # re-evaluate the affine chain independently
        a = x
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            z = a @ w + b
            a = z if i == len(net.weights) - 1 else np.where(z > 0, z, 0.01 * z)
        assert np.allclose(net.forward(x), a, atol=1e-12)

    def test_forward_is_pure(self, rng):
        net = small_net(rng)
        x = rng.standard_normal(3)
        assert np.array_equal(net.forward(x), net.forward(x))

    def test_batch_forward_matches_loop(self, rng):
        net = small_net(rng)
        xs = rng.standard_normal((4, 3))
        batch = net.forward(xs)
        for i in range(4):
            assert np.allclose(batch[i], net.forward(xs[i]))

    def test_shape_mismatch_raises(self, rng):
        net = small_net(rng)
        with pytest.raises(DimensionError):
            net.forward(np.zeros(4))

    def test_final_nonlinear_applies_activation(self, rng):
        flat = np.random.default_rng(3).standard_normal(
            FeedForwardNet.init([2, 3], np.random.default_rng(0)).n_params)
        lin = FeedForwardNet.from_flat([2, 3], flat)
        act = FeedForwardNet.from_flat([2, 3], flat, final_nonlinear=True)
        x = np.array([0.5, -1.0])
        assert np.allclose(act.forward(x), leaky_relu(lin.forward(x)))


class TestBackward:
    def test_scalar_net_gradient(self):
        net = FeedForwardNet([1, 1], [np.array([[3.0]])], [np.zeros(1)])
        _, cache = net.forward_cached(np.array([2.0]))
        grads, _ = net.backward(cache, np.array([1.0]))
        dw, db = grads[0]
        assert dw[0, 0] == pytest.approx(2.0)
        assert db[0] == pytest.approx(1.0)

    def test_zero_upstream_gives_zero_grads(self, rng):
        net = small_net(rng)
        _, cache = net.forward_cached(rng.standard_normal(3))
        grads, gin = net.backward(cache, np.zeros(2))
        assert np.allclose(net.flat_grads(grads), 0.0)
        assert np.allclose(gin, 0.0)

    def test_backward_requires_cache(self, rng):
        net = small_net(rng)
        with pytest.raises(RuntimeError):
            net.backward(None, np.zeros(2))

    @pytest.mark.parametrize("trial", range(5))
    def test_matches_finite_differences(self, trial):
        rng = np.random.default_rng(trial)
        net = small_net(rng, (3, 4, 4, 2))
        x = rng.standard_normal(3)
        upstream = rng.standard_normal(2)

        def loss(flat):
            probe = net.clone()
            probe.set_flat_params(flat)
            return float(probe.forward(x) @ upstream)

        _, cache = net.forward_cached(x)
        grads, _ = net.backward(cache, upstream)
        numeric = central_diff(loss, net.flat_params())
        assert_grads_close(net.flat_grads(grads), numeric, min_frac=0.99)

    def test_input_gradient_matches_finite_differences(self, rng):
        net = small_net(rng)
        x = rng.standard_normal(3)
        upstream = rng.standard_normal(2)
        _, cache = net.forward_cached(x)
        _, gin = net.backward(cache, upstream)
        numeric = central_diff(lambda xv: float(net.forward(xv) @ upstream), x.copy())
        assert_grads_close(gin, numeric, min_frac=0.99)

    def test_dropout_backward_sees_same_masks(self):
        net = small_net(np.random.default_rng(1), (3, 8, 2))
        x = np.random.default_rng(2).standard_normal(3)
        out, cache = net.forward_cached(x, dropout=0.5, rng=np.random.default_rng(7))
        upstream = np.ones(2)
        grads, _ = net.backward(cache, upstream)
        # replay the same masks: finite differences of the masked network
        masks = cache["masks"]

        def masked_loss(flat):
            probe = net.clone()
            probe.set_flat_params(flat)
            a = x[None, :]
            n = len(probe.weights)
            for i, (w, b) in enumerate(zip(probe.weights, probe.biases)):
                z = a @ w + b
                a = z if i == n - 1 else np.where(z > 0, z, 0.01 * z)
                if masks[i] is not None:
                    a = a * masks[i]
            return float(a[0] @ upstream)

        numeric = central_diff(masked_loss, net.flat_params())
        assert_grads_close(net.flat_grads(grads), numeric, min_frac=0.99)


class TestAdam:
    def test_zero_gradient_is_identity(self):
        state = AdamState(3, lr=0.1)
        params = np.array([1.0, -2.0, 0.5])
        out = adam_step(state, params, np.zeros(3))
        assert np.allclose(out, params)
        assert state.step_count == 1

    def test_first_step_is_signed_lr(self):
        state = AdamState(2, lr=0.05)
        grads = np.array([0.3, -7.0])
        out = adam_step(state, np.zeros(2), grads)
        assert np.allclose(out, -0.05 * np.sign(grads), atol=1e-6)

    def test_scalar_quadratic_converges(self):
        state = AdamState(1, lr=0.05)
        w = np.array([0.0])
        for _ in range(100):
            w = adam_step(state, w, 2.0 * (w - 3.0))
        assert abs(w[0] - 3.0) < 0.1

    def test_nonfinite_gradient_names_index(self):
        state = AdamState(3, lr=0.1)
        grads = np.array([0.0, np.nan, 0.0])
        with pytest.raises(NumericError, match="index 1"):
            adam_step(state, np.zeros(3), grads)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adam_step(AdamState(2, 0.1), np.zeros(3), np.zeros(3))


class TestClip:
    def test_small_gradient_untouched(self):
        g = np.array([0.3, 0.4])
        assert np.array_equal(clip_global_norm(g, 10.0), g)

    def test_large_gradient_rescaled(self):
        g = np.array([30.0, 40.0])
        out = clip_global_norm(g, 5.0)
        assert np.linalg.norm(out) == pytest.approx(5.0)
        assert np.allclose(out / np.linalg.norm(out), g / np.linalg.norm(g))


class TestSerialization:
    def test_save_load_bit_exact(self, tmp_path, rng):
        arrays = [("a", rng.standard_normal((3, 2))), ("b", rng.standard_normal(5))]
        path = tmp_path / "params.json"
        save_params(path, arrays)
        loaded = dict(load_params(path))
        for name, arr in arrays:
            assert np.array_equal(loaded[name], arr)  # bit-exact round trip


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3))
@settings(max_examples=30, deadline=None)
def test_forward_finite_on_finite_input(vals):
    net = FeedForwardNet.init([3, 4, 2], np.random.default_rng(0))
    assert np.all(np.isfinite(net.forward(np.array(vals))))
