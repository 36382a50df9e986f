"""Unit tests for the reverse-mode tensor module."""

import math

import numpy as np
import pytest

from prunemerge import tensor as T
from prunemerge.errors import ContractError, NumericError, ShapeMismatchError

from helpers import assert_grads_close, numeric_grad


class TestMatmul:
    def test_identity(self):
        a = T.Tensor(np.eye(2))
        b = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal((a @ b).data, b.data)

    def test_hand_values(self):
        a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = T.Tensor([[5.0], [6.0]])
        np.testing.assert_array_equal((a @ b).data, [[17.0], [39.0]])

    def test_zeros(self):
        a = T.Tensor(np.zeros((2, 3)))
        b = T.Tensor(np.arange(12.0).reshape(3, 4))
        np.testing.assert_array_equal((a @ b).data, np.zeros((2, 4)))

    def test_shape_mismatch_names_both_shapes(self):
        a = T.Tensor(np.zeros((2, 3)))
        b = T.Tensor(np.zeros((4, 2)))
        with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(4, 2\)"):
            a @ b

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(42)
        a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)

        def loss():
            return float(((T.Tensor(a.data, requires_grad=True)
                           @ T.Tensor(b.data)) * T.Tensor(w)).sum().data)

        w = rng.normal(size=(3, 2))
        out = ((a @ b) * T.Tensor(w)).sum()
        T.backward(out)
        assert_grads_close(a.grad, numeric_grad(loss, a.data))
        assert_grads_close(b.grad, numeric_grad(loss, b.data))

    def test_broadcast_batched_gradients(self):
        # (m,k) @ (B,k,n): the shared left operand must sum grads over B.
        rng = np.random.default_rng(7)
        a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(5, 4, 2)), requires_grad=True)
        out = (a @ b).sum()
        T.backward(out)

        def loss():
            return float(np.matmul(a.data, b.data).sum())

        assert_grads_close(a.grad, numeric_grad(loss, a.data))
        assert_grads_close(b.grad, numeric_grad(loss, b.data))


class TestSoftmax:
    def test_symmetry(self):
        y = T.softmax_rows(T.Tensor([0.0, 0.0]))
        np.testing.assert_allclose(y.data, [0.5, 0.5], atol=1e-15)

    def test_saturation_is_stable(self):
        y = T.softmax_rows(T.Tensor([1e9, 0.0]))
        np.testing.assert_allclose(y.data, [1.0, 0.0], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            x = rng.normal(scale=rng.uniform(0.1, 50.0), size=(4, 7))
            y = T.softmax_rows(T.Tensor(x))
            np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-12)
            assert (y.data >= 0).all()

    def test_grad_of_row_sums_is_zero(self):
        x = T.Tensor(np.random.default_rng(0).normal(size=(3, 5)),
                     requires_grad=True)
        T.backward(T.softmax_rows(x).sum())
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)

    def test_nan_input_rejected(self):
        with pytest.raises(NumericError):
            T.softmax_rows(T.Tensor([np.nan, 0.0]))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        x = T.Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        w = rng.normal(size=(2, 4))
        T.backward((T.softmax_rows(x) * T.Tensor(w)).sum())

        def loss():
            e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
            return float((e / e.sum(axis=-1, keepdims=True) * w).sum())

        assert_grads_close(x.grad, numeric_grad(loss, x.data))


class TestLayerNorm:
    def _params(self, d):
        return T.Tensor(np.ones(d), requires_grad=True), \
            T.Tensor(np.zeros(d), requires_grad=True)

    def test_constant_rows_map_to_zero(self):
        g, b = self._params(4)
        x = T.Tensor(np.full((3, 4), 2.5))
        y = T.layer_norm(x, g, b)
        np.testing.assert_allclose(y.data, 0.0, atol=1e-9)

    def test_zero_gamma_gives_beta(self):
        x = T.Tensor(np.random.default_rng(1).normal(size=(2, 4)))
        y = T.layer_norm(x, T.Tensor(np.zeros(4)), T.Tensor(np.full(4, 3.0)))
        np.testing.assert_array_equal(y.data, np.full((2, 4), 3.0))

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(3, 4))
        gamma = rng.normal(size=4)
        beta = rng.normal(size=4)
        y = T.layer_norm(T.Tensor(x), T.Tensor(gamma), T.Tensor(beta))
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        expected = (x - mu) / np.sqrt(var + 1e-6) * gamma + beta
        np.testing.assert_allclose(y.data, expected, atol=1e-10)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        x = T.Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        gamma = T.Tensor(rng.normal(size=6), requires_grad=True)
        beta = T.Tensor(rng.normal(size=6), requires_grad=True)
        w = rng.normal(size=(3, 6))
        T.backward((T.layer_norm(x, gamma, beta) * T.Tensor(w)).sum())

        def loss():
            mu = x.data.mean(axis=-1, keepdims=True)
            var = x.data.var(axis=-1, keepdims=True)
            xh = (x.data - mu) / np.sqrt(var + 1e-6)
            return float(((xh * gamma.data + beta.data) * w).sum())

        assert_grads_close(x.grad, numeric_grad(loss, x.data))
        assert_grads_close(gamma.grad, numeric_grad(loss, gamma.data))
        assert_grads_close(beta.grad, numeric_grad(loss, beta.data))


class TestGelu:
    def test_zero(self):
        assert T.gelu(T.Tensor(0.0)).data == 0.0

    def test_asymptote(self):
        x = np.array([6.0, 8.0, 12.0])
        np.testing.assert_allclose(T.gelu(T.Tensor(x)).data, x, atol=1e-6)

    def test_gradient_matches_finite_differences(self):
        x = T.Tensor(np.array([-3.0, -1.0, -0.2, 0.0, 0.4, 1.7, 3.0]),
                     requires_grad=True)
        T.backward(T.gelu(x).sum())

        def loss():
            c = math.sqrt(2.0 / math.pi)
            u = c * (x.data + 0.044715 * x.data ** 3)
            return float((0.5 * x.data * (1.0 + np.tanh(u))).sum())

        assert_grads_close(x.grad, numeric_grad(loss, x.data), rel=1e-6)


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = T.Tensor(np.zeros((3, 4)))
        labels = np.array([0, 1, 3])
        loss = T.cross_entropy(logits, labels)
        np.testing.assert_allclose(loss.data, math.log(4.0), atol=1e-12)

    def test_saturated_correct_logits(self):
        logits = np.full((2, 3), -50.0)
        logits[0, 1] = 50.0
        logits[1, 2] = 50.0
        loss = T.cross_entropy(T.Tensor(logits), np.array([1, 2]))
        assert loss.data < 1e-12

    def test_hand_value(self):
        loss = T.cross_entropy(T.Tensor([[1.0, 2.0]]), np.array([0]))
        np.testing.assert_allclose(loss.data, math.log(1.0 + math.e),
                                   atol=1e-10)

    def test_out_of_range_label(self):
        with pytest.raises(ContractError):
            T.cross_entropy(T.Tensor(np.zeros((1, 3))), np.array([3]))
        with pytest.raises(ContractError):
            T.cross_entropy(T.Tensor(np.zeros((1, 3))), np.array([-1]))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        logits = T.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        labels = np.array([0, 2, 4, 1])
        T.backward(T.cross_entropy(logits, labels))

        def loss():
            z = logits.data
            lse = np.log(np.exp(z - z.max(-1, keepdims=True)).sum(-1)) \
                + z.max(-1)
            return float(np.mean(lse - z[np.arange(4), labels]))

        assert_grads_close(logits.grad, numeric_grad(loss, logits.data))


class TestKLDivergence:
    def test_identical_logits_give_zero(self):
        x = np.random.default_rng(2).normal(size=(3, 5))
        loss = T.kl_divergence(T.Tensor(x), T.Tensor(x))
        np.testing.assert_allclose(loss.data, 0.0, atol=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            p = T.Tensor(rng.normal(scale=3.0, size=(2, 6)))
            q = T.Tensor(rng.normal(scale=3.0, size=(2, 6)))
            assert T.kl_divergence(p, q).data >= -1e-15

    def test_hand_value(self):
        loss = T.kl_divergence(T.Tensor([[0.0, 0.0]]),
                               T.Tensor([[math.log(3.0), 0.0]]))
        expected = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
        np.testing.assert_allclose(loss.data, expected, atol=1e-12)

    def test_teacher_receives_no_gradient(self):
        p = T.Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
        q = T.Tensor(np.array([[0.5, 0.1]]), requires_grad=True)
        T.backward(T.kl_divergence(p, q))
        assert p.grad is not None
        assert q.grad is None

    def test_temperature_must_be_positive(self):
        with pytest.raises(ContractError):
            T.kl_divergence(T.Tensor([[0.0]]), T.Tensor([[0.0]]),
                            temperature=0.0)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(13)
        p = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        q = rng.normal(size=(3, 4))
        temp = 2.0
        T.backward(T.kl_divergence(p, T.Tensor(q), temperature=temp))

        def loss():
            def logsm(z):
                s = z - z.max(-1, keepdims=True)
                return s - np.log(np.exp(s).sum(-1, keepdims=True))
            lq = logsm(q / temp)
            lp = logsm(p.data / temp)
            return float((np.exp(lq) * (lq - lp)).sum(-1).mean())

        assert_grads_close(p.grad, numeric_grad(loss, p.data))


class TestBackward:
    def test_sum_gives_ones(self):
        x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        T.backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_elementwise_square(self):
        x = T.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        T.backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(x * x)

    def test_accumulation_until_zeroed(self):
        x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        T.backward((x * x).sum())
        first = x.grad.copy()
        T.backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, 2.0 * first)
        x.zero_grad()
        assert x.grad is None
        T.backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, first)

    def test_deterministic_bit_identical(self):
        def run():
            rng = np.random.default_rng(99)
            x = T.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            y = T.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            out = T.gelu(x @ y)
            T.backward(T.softmax_rows(out).sum(axis=None))
            return x.grad.copy(), y.grad.copy()

        gx1, gy1 = run()
        gx2, gy2 = run()
        assert (gx1 == gx2).all() and (gy1 == gy2).all()

    def test_tape_visits_each_node_once(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        y = x * x
        z = y + y  # diamond: y consumed twice
        tape = T.backward(z.sum())
        assert tape.visit_counts
        assert all(c == 1 for c in tape.visit_counts.values())
        np.testing.assert_array_equal(x.grad, [4.0, 4.0, 4.0])

    def test_residual_topology_orders_tape_correctly(self):
        # A node feeding both a short residual edge and a longer chain must
        # have all consumer gradients folded in before it propagates.
        x = T.Tensor(np.array([0.3, -0.7, 1.1]), requires_grad=True)
        a = x * x
        out = (a + T.gelu(T.gelu(a))).sum()
        T.backward(out)

        def loss():
            v = x.data ** 2

            def g(t):
                c = math.sqrt(2.0 / math.pi)
                return 0.5 * t * (1 + np.tanh(c * (t + 0.044715 * t ** 3)))

            return float((v + g(g(v))).sum())

        assert_grads_close(x.grad, numeric_grad(loss, x.data), rel=1e-6)

    def test_intermediate_grads_populated(self):
        x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        mid = x * x
        T.backward((mid * T.Tensor([3.0, 4.0])).sum())
        np.testing.assert_array_equal(mid.grad, [3.0, 4.0])

    def test_grad_shape_matches_data(self):
        rng = np.random.default_rng(21)
        x = T.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        T.backward((x * x).mean())
        assert x.grad.shape == x.data.shape


class TestShapeOps:
    def test_reshape_transpose_take_concat_grads(self):
        rng = np.random.default_rng(17)
        x = T.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        w = rng.normal(size=(3, 2, 2))
        a = T.transpose(x, (1, 0, 2))
        out = (T.concat([a[:, :, :2] * a[:, :, :2], a[:, :, 2:]],
                        axis=2)[:, :, :2] * T.Tensor(w)).sum()
        T.backward(out)

        def loss():
            at = x.data.transpose(1, 0, 2)
            cat = np.concatenate([at[:, :, :2] ** 2, at[:, :, 2:]], axis=2)
            return float((cat[:, :, :2] * w).sum())

        assert_grads_close(x.grad, numeric_grad(loss, x.data))

    def test_broadcast_to_grads(self):
        x = T.Tensor(np.array([[1.0], [2.0]]), requires_grad=True)
        T.backward(T.broadcast_to(x, (2, 3)).sum())
        np.testing.assert_array_equal(x.grad, [[3.0], [3.0]])

    def test_mean_grads(self):
        x = T.Tensor(np.arange(8.0).reshape(2, 4), requires_grad=True)
        T.backward(x.mean(axis=1).sum())
        np.testing.assert_allclose(x.grad, 0.25)

    def test_fancy_indexing_rejected(self):
        x = T.Tensor(np.ones(5), requires_grad=True)
        with pytest.raises(ContractError):
            x[np.array([0, 0, 1])]

    def test_tensor_division_rejected(self):
        x = T.Tensor(np.ones(3))
        with pytest.raises(ContractError):
            x / T.Tensor(np.ones(3))
        np.testing.assert_allclose((x / 2.0).data, 0.5)

    def test_detach_cuts_graph(self):
        x = T.Tensor(np.array([2.0]), requires_grad=True)
        y = (x * x).detach()
        assert y.requires_grad is False
        z = y * T.Tensor([3.0])
        assert z.requires_grad is False
