import math

import numpy as np
import pytest

from protogate import numkit
from protogate.errors import (
    DimensionError,
    PoisonedGradientError,
    UndefinedSimilarityError,
)


class TestMatvec:
    def test_identity(self):
        v = np.array([1.0, 2.0, 3.0])
        assert np.array_equal(numkit.matvec(np.eye(3), v), v)

    def test_zero_matrix(self):
        out = numkit.matvec(np.zeros((2, 3)), np.array([5.0, -1.0, 2.0]))
        assert np.array_equal(out, np.zeros(2))

    def test_hand_arithmetic(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = numkit.matvec(m, np.array([1.0, 1.0]))
        assert np.array_equal(out, np.array([3.0, 7.0]))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            numkit.matvec(np.eye(3), np.array([1.0, 2.0]))


class TestSoftmax:
    def test_constant_input_is_uniform(self):
        for c in (-100.0, 0.0, 3.5, 1e6):
            out = numkit.softmax(np.full(3, c))
            assert np.allclose(out, 1.0 / 3.0, atol=1e-15)

    def test_single_element(self):
        assert numkit.softmax(np.array([42.0]))[0] == 1.0

    def test_closed_form(self):
        out = numkit.softmax(np.array([0.0, math.log(3.0)]))
        assert np.allclose(out, [0.25, 0.75], atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(DimensionError):
            numkit.softmax(np.array([]))

    def test_sums_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            v = rng.normal(size=rng.integers(1, 12)) * rng.uniform(0.1, 50)
            out = numkit.softmax(v)
            assert abs(out.sum() - 1.0) < 1e-12
            assert np.all(out >= 0)
            shifted = numkit.softmax(v + rng.normal() * 10)
            assert np.allclose(out, shifted, atol=1e-10)


class TestCosineSimilarity:
    def test_self_similarity(self):
        v = np.array([0.3, -1.2, 4.0])
        assert numkit.cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert numkit.cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_closed_form(self):
        s = numkit.cosine_similarity([1.0, 1.0], [1.0, 0.0])
        assert abs(s - 1.0 / math.sqrt(2.0)) < 1e-4

    def test_zero_norm_rejected(self):
        with pytest.raises(UndefinedSimilarityError):
            numkit.cosine_similarity([0.0, 0.0], [1.0, 0.0])

    def test_symmetric_and_scale_invariant(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            a = rng.normal(size=6)
            b = rng.normal(size=6)
            t = rng.uniform(1e-3, 1e3)
            assert abs(
                numkit.cosine_similarity(a, b) - numkit.cosine_similarity(b, a)
            ) < 1e-12
            assert abs(
                numkit.cosine_similarity(a, b) - numkit.cosine_similarity(t * a, b)
            ) < 1e-10

    def test_clamped(self):
        a = np.full(4, 1e-150)
        assert -1.0 <= numkit.cosine_similarity(a, a) <= 1.0


class TestAdam:
    def test_zero_grad_zero_decay_fixed_point(self):
        params = {"w": np.array([1.0, -2.0, 3.0])}
        state = numkit.AdamState(lr=1e-2, weight_decay=0.0)
        for _ in range(5):
            params = numkit.adam_step(params, {"w": np.zeros(3)}, state)
        assert np.array_equal(params["w"], np.array([1.0, -2.0, 3.0]))

    def test_first_step_sign_like(self):
        g = np.array([0.5, -3.0, 1e-4])
        lr = 1e-3
        params = {"w": np.zeros(3)}
        state = numkit.AdamState(lr=lr, weight_decay=0.0)
        out = numkit.adam_step(params, {"w": g}, state)
        expected = -lr * g / (np.abs(g) + state.eps)
        assert np.allclose(out["w"], expected, atol=1e-18)

    def test_decoupled_decay_shrinks_param(self):
        # stock lr and decay: one zero-grad step multiplies by (1 - 5e-10)
        params = {"w": np.array([2.0])}
        state = numkit.AdamState(lr=5e-5, weight_decay=1e-5)
        out = numkit.adam_step(params, {"w": np.zeros(1)}, state)
        assert out["w"][0] == pytest.approx(2.0 * (1.0 - 5e-10), rel=0, abs=1e-18)

    def test_step_counter_and_moment_shapes(self):
        params = {"w": np.zeros((2, 3)), "b": np.zeros(2)}
        grads = {"w": np.ones((2, 3)), "b": np.ones(2)}
        state = numkit.AdamState()
        numkit.adam_step(params, grads, state)
        numkit.adam_step(params, grads, state)
        assert state.step == 2
        assert state.m["w"].shape == (2, 3)
        assert state.v["b"].shape == (2,)

    def test_nan_grad_rejected(self):
        state = numkit.AdamState()
        with pytest.raises(PoisonedGradientError):
            numkit.adam_step(
                {"w": np.zeros(2)}, {"w": np.array([1.0, np.nan])}, state
            )

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            numkit.adam_step(
                {"w": np.zeros(2)}, {"w": np.zeros(3)}, numkit.AdamState()
            )

    def test_input_arrays_not_mutated(self):
        w = np.array([1.0, 2.0])
        params = {"w": w}
        numkit.adam_step(params, {"w": np.ones(2)}, numkit.AdamState(lr=0.1))
        assert np.array_equal(w, np.array([1.0, 2.0]))


class TestGradCheck:
    def test_quadratic_loss(self):
        def loss_fn(params):
            p = params["p"]
            return 0.5 * float(p @ p), {"p": p.copy()}

        params = {"p": np.random.default_rng(3).normal(size=8)}
        assert numkit.grad_check(loss_fn, params) < 1e-7

    def test_ce_over_linear_classifier(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(5, 4))
        y = rng.integers(0, 3, size=5)

        def loss_fn(params):
            logits = x @ params["w"].T + params["b"]
            shifted = logits - logits.max(axis=1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            loss = -logp[np.arange(5), y].mean()
            probs = np.exp(logp)
            dlogits = probs.copy()
            dlogits[np.arange(5), y] -= 1.0
            dlogits /= 5.0
            return float(loss), {"w": dlogits.T @ x, "b": dlogits.sum(axis=0)}

        params = {"w": rng.normal(size=(3, 4)) * 0.3, "b": rng.normal(size=3) * 0.1}
        assert numkit.grad_check(loss_fn, params) < 1e-5

    def test_detects_wrong_gradient(self):
        def bad_loss_fn(params):
            p = params["p"]
            return 0.5 * float(p @ p), {"p": 2.0 * p}

        params = {"p": np.ones(3)}
        assert numkit.grad_check(bad_loss_fn, params) > 0.1
