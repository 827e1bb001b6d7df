import numpy as np
import pytest

from streamreid.mlp import (AdamState, ClassifierHead, MLP, StaleCacheError,
                            adam_step, add_grads, load_checkpoint,
                            save_checkpoint)
from tests.conftest import fd_param_gradients, identity_extractor, max_rel_error


class TestForward:
    def test_zero_parameters_give_zero_features(self):
        m = MLP([4, 3, 2], seed=0)
        m.set_params({k: np.zeros_like(v) for k, v in m.params.items()})
        f = m.features(np.random.default_rng(0).standard_normal((5, 4)))
        assert np.array_equal(f, np.zeros((5, 2)))

    def test_identity_single_layer_passthrough(self):
        m = identity_extractor(3)
        x = np.random.default_rng(1).standard_normal((6, 3))
        assert np.allclose(m.features(x), x, atol=0, rtol=0)

    def test_matches_straight_line_reevaluation(self):
        m = MLP([5, 4, 3], seed=7)
        x = np.random.default_rng(2).standard_normal((8, 5))
        w1, b1 = m.params["layer0.W"], m.params["layer0.b"]
        w2, b2 = m.params["layer1.W"], m.params["layer1.b"]
        expected = np.tanh(x @ w1 + b1) @ w2 + b2
        assert np.allclose(m.features(x), expected, rtol=0, atol=1e-15)

    def test_batch_equivariance(self):
        m = MLP([4, 6, 3], seed=3)
        x = np.random.default_rng(3).standard_normal((7, 4))
        perm = np.random.default_rng(4).permutation(7)
        assert np.array_equal(m.features(x)[perm], m.features(x[perm]))

    def test_shape_mismatch_rejected(self):
        m = MLP([4, 2], seed=0)
        with pytest.raises(ValueError, match="batch shape"):
            m.features(np.zeros((3, 5)))


class TestBackward:
    def test_zero_grad_output_gives_zero_gradients(self):
        m = MLP([3, 4, 2], seed=1)
        f, cache = m.forward(np.random.default_rng(0).standard_normal((5, 3)))
        grads = m.backward(cache, np.zeros_like(f))
        assert all(not g.any() for g in grads.values())

    def test_sum_loss_matches_finite_differences(self):
        for seed in range(5):
            m = MLP([4, 6, 3], seed=seed)
            x = np.random.default_rng(seed).standard_normal((6, 4))
            f, cache = m.forward(x)
            analytic = m.backward(cache, np.ones_like(f))
            numeric = fd_param_gradients(m, lambda: float(m.features(x).sum()))
            for name in analytic:
                assert max_rel_error(analytic[name], numeric[name]) <= 1e-4

    def test_backward_is_linear_in_grad_output(self):
        m = MLP([3, 5, 2], seed=2)
        rng = np.random.default_rng(5)
        _, cache = m.forward(rng.standard_normal((4, 3)))
        ga = rng.standard_normal((4, 2))
        gb = rng.standard_normal((4, 2))
        sum_of = add_grads(m.backward(cache, ga), m.backward(cache, gb))
        combined = m.backward(cache, ga + gb)
        for name in combined:
            assert np.allclose(sum_of[name], combined[name], atol=1e-12)

    def test_stale_cache_rejected(self):
        m = MLP([3, 2], seed=0)
        _, cache = m.forward(np.zeros((2, 3)))
        m.mark_updated()
        with pytest.raises(StaleCacheError):
            m.backward(cache, np.zeros((2, 2)))


class TestAdam:
    def test_zero_gradients_zero_decay_is_fixed_point(self):
        m = MLP([3, 2], seed=4)
        before = m.copy_params()
        state = AdamState(weight_decay=0.0)
        adam_step(m.params, {k: np.zeros_like(v) for k, v in m.params.items()},
                  state, schedule_position=0.0)
        for k in before:
            assert np.array_equal(m.params[k], before[k])

    def test_schedule_endpoint_leaves_only_weight_decay(self):
        m = MLP([3, 2], seed=5)
        before = m.copy_params()
        state = AdamState(lr_initial=1e-2, weight_decay=0.1)
        grads = {k: np.ones_like(v) for k, v in m.params.items()}
        adam_step(m.params, grads, state, schedule_position=1.0)
        assert np.allclose(m.params["layer0.W"],
                           before["layer0.W"] * (1.0 - 1e-2 * 0.1), atol=1e-15)
        assert np.array_equal(m.params["layer0.b"], before["layer0.b"])

    def test_scalar_trajectory_matches_hand_recurrence(self):
        # constant gradient g on a single scalar block, 3 steps, no decay
        g = 0.7
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
        params = {"p": np.array([1.0])}
        state = AdamState(lr_initial=lr, weight_decay=0.0, beta1=b1, beta2=b2,
                          epsilon=eps)
        theta, m, v = 1.0, 0.0, 0.0
        for t in range(1, 4):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
            adam_step(params, {"p": np.array([g])}, state, 0.0)
            assert params["p"][0] == pytest.approx(theta, abs=1e-15)

    def test_effective_lr_is_linear_in_schedule(self):
        # one step at position 0.5 moves exactly half as far as at 0
        def one_step(pos):
            params = {"p": np.array([0.0])}
            adam_step(params, {"p": np.array([1.0])},
                      AdamState(lr_initial=1e-2, weight_decay=0.0), pos)
            return params["p"][0]

        assert one_step(0.5) == pytest.approx(0.5 * one_step(0.0), rel=1e-12)

    def test_non_finite_gradient_names_block(self):
        m = MLP([2, 2], seed=0)
        grads = {k: np.zeros_like(v) for k, v in m.params.items()}
        grads["layer0.W"][0, 0] = np.nan
        with pytest.raises(ValueError, match="layer0.W"):
            adam_step(m.params, grads, AdamState(), 0.0)

    def test_update_independent_of_block_order(self):
        rng = np.random.default_rng(8)
        grads = {"a.W": rng.standard_normal((2, 2)), "z.W": rng.standard_normal((3,))}
        p1 = {"a.W": np.ones((2, 2)), "z.W": np.ones(3)}
        p2 = {k: v.copy() for k, v in p1.items()}
        adam_step(p1, grads, AdamState(), 0.0)
        adam_step(p2, {k: grads[k] for k in reversed(list(grads))}, AdamState(), 0.0)
        for k in p1:
            assert np.array_equal(p1[k], p2[k])


class TestClassifierHead:
    def test_logit_shape_and_gradient(self):
        head = ClassifierHead(4, 3, seed=0)
        f = np.random.default_rng(0).standard_normal((5, 4))
        logits = head.forward(f)
        assert logits.shape == (5, 3)
        gl = np.random.default_rng(1).standard_normal((5, 3))
        grads, gf = head.backward(f, gl)
        assert grads["W"].shape == (4, 3) and grads["b"].shape == (3,)
        assert np.allclose(gf, gl @ head.params["W"].T)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = MLP([4, 3, 2], seed=9)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, m.params)
        back = load_checkpoint(path)
        assert sorted(back) == sorted(m.params)
        for k in back:
            assert np.array_equal(back[k], m.params[k])

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            load_checkpoint(path)
