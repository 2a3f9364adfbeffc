import math

import numpy as np
import pytest

from conceptseq.autodiff import Parameter, ShapeError, Tensor, backward, grad_check, sigmoid
from conceptseq.nn import (
    Conv2DLayer,
    DenseLayer,
    EmbeddingMatrix,
    RMSProp,
    rmsprop_step,
    sigmoid_ce_loss,
    softmax_nll_sequence,
)
from oracles import loop_sigmoid_ce, loop_softmax_nll


class TestSigmoidCE:
    def test_perfect_prediction_is_nearly_zero(self):
        loss = sigmoid_ce_loss(np.array([1.0, 0.0]), Tensor([1 - 1e-7, 1e-7]))
        assert math.isclose(loss.item(), 2e-7, rel_tol=1e-3)

    def test_half_probability_is_ln2(self):
        loss = sigmoid_ce_loss(np.array([1.0]), Tensor([0.5]))
        assert abs(loss.item() - math.log(2)) < 1e-12

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            t = (rng.random(9) < 0.5).astype(float)
            p = rng.uniform(1e-4, 1 - 1e-4, 9)
            ours = sigmoid_ce_loss(t, Tensor(p)).item()
            assert abs(ours - loop_sigmoid_ce(t, p)) < 1e-12

    def test_nonnegative_and_zero_only_at_clamp(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            t = (rng.random(5) < 0.5).astype(float)
            p = rng.uniform(0.01, 0.99, 5)
            assert sigmoid_ce_loss(t, Tensor(p)).item() > 0.0
        exact = np.where(np.array([1.0, 0.0]) == 1.0, 1 - 1e-7, 1e-7)
        assert sigmoid_ce_loss(np.array([1.0, 0.0]), Tensor(exact)).item() < 1e-6

    def test_length_mismatch_raises(self):
        with pytest.raises(ShapeError):
            sigmoid_ce_loss(np.array([1.0, 0.0]), Tensor([0.5]))

    def test_targets_must_be_binary(self):
        with pytest.raises(ValueError):
            sigmoid_ce_loss(np.array([0.3]), Tensor([0.5]))

    def test_gradient_through_sigmoid(self):
        rng = np.random.default_rng(2)
        z = Parameter(rng.standard_normal(6))
        t = (rng.random(6) < 0.5).astype(float)
        assert grad_check(lambda: sigmoid_ce_loss(t, sigmoid(z)), [z], 1e-5) < 1e-6


class TestSoftmaxNLL:
    def test_uniform_logits(self):
        loss = softmax_nll_sequence(Tensor(np.zeros((2, 4))), [1, 3])
        assert abs(loss.item() - 2 * math.log(4)) < 1e-12

    def test_saturated_logits_vanish(self):
        logits = np.full((3, 5), -1e4)
        for t, row in enumerate(logits):
            row[t] = 1e4
        assert softmax_nll_sequence(Tensor(logits), [0, 1, 2]).item() < 1e-12

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            z = rng.standard_normal((4, 6)) * 3
            t = rng.integers(0, 6, 4)
            ours = softmax_nll_sequence(Tensor(z), t).item()
            assert abs(ours - loop_softmax_nll(z.tolist(), t.tolist())) < 1e-12

    def test_batched_equals_sum_of_singles(self):
        rng = np.random.default_rng(4)
        z = rng.standard_normal((3, 4, 5))
        t = rng.integers(0, 5, (3, 4))
        total = softmax_nll_sequence(Tensor(z), t).item()
        singles = sum(softmax_nll_sequence(Tensor(z[b]), t[b]).item() for b in range(3))
        assert abs(total - singles) < 1e-10

    def test_out_of_range_target_raises(self):
        with pytest.raises(ValueError):
            softmax_nll_sequence(Tensor(np.zeros((2, 3))), [0, 3])


class TestRMSProp:
    def test_zero_gradient_keeps_params(self):
        p = Parameter(np.array([1.0, -2.0]))
        opt = RMSProp([p], lr=0.1)
        opt.step()  # grad is zero after init
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_closed_form(self):
        g = np.array([0.3, -1.2])
        p = Parameter(np.array([0.0, 0.0]))
        p.grad[...] = g
        lr, decay, eps = 1e-3, 0.9, 1e-8
        opt = RMSProp([p], lr=lr, decay=decay, eps=eps)
        opt.step()
        expected = -lr * g / np.sqrt((1 - decay) * g * g + eps)
        np.testing.assert_allclose(p.data, expected, rtol=1e-12)

    def test_lr_zero_is_identity(self):
        p = Parameter(np.array([3.0]))
        p.grad[...] = 5.0
        RMSProp([p], lr=0.0).step()
        assert p.data[0] == 3.0

    def test_quadratic_descends_monotonically_after_warmup(self):
        p = Parameter(np.array([0.0]))
        opt = RMSProp([p], lr=1e-3)
        losses = []
        for _ in range(100):
            opt.zero_grad()
            loss = (p.data[0] - 3.0) ** 2
            p.grad[...] = 2 * (p.data[0] - 3.0)
            losses.append(loss)
            opt.step()
        for a, b in zip(losses[10:], losses[11:]):
            assert b <= a + 1e-15

    def test_functional_step_matches_class(self):
        rng = np.random.default_rng(5)
        vals = rng.standard_normal(4)
        g = rng.standard_normal(4)
        p = Parameter(vals.copy())
        p.grad[...] = g
        opt = RMSProp([p], lr=0.01)
        opt.step()
        arr, ms = vals.copy(), np.zeros(4)
        rmsprop_step([arr], [g], [ms], lr=0.01)
        np.testing.assert_allclose(arr, p.data, rtol=1e-15)


class TestLayers:
    def test_dense_identity(self):
        rng = np.random.default_rng(6)
        layer = DenseLayer(4, 4, rng)
        layer.W.data[...] = np.eye(4)
        layer.b.data[...] = 0.0
        x = rng.standard_normal(4)
        np.testing.assert_array_equal(layer(Tensor(x)).data, x)

    def test_dense_batched_equals_per_row(self):
        rng = np.random.default_rng(7)
        layer = DenseLayer(5, 3, rng)
        X = rng.standard_normal((4, 5))
        batched = layer(Tensor(X)).data
        rows = np.stack([layer(Tensor(x)).data for x in X])
        np.testing.assert_allclose(batched, rows, atol=1e-12)

    def test_conv_layer_shapes_and_single_image(self):
        rng = np.random.default_rng(8)
        layer = Conv2DLayer(3, 4, 3, rng)
        x = rng.standard_normal((2, 3, 8, 8))
        assert layer(Tensor(x)).shape == (2, 4, 6, 6)
        single = layer(Tensor(x[0])).data
        np.testing.assert_allclose(single, layer(Tensor(x)).data[0], atol=1e-12)

    def test_conv_kernel_must_be_odd(self):
        with pytest.raises(ShapeError):
            Conv2DLayer(1, 1, 4, np.random.default_rng(0))

    def test_init_ranges(self):
        rng = np.random.default_rng(9)
        layer = DenseLayer(50, 40, rng)
        assert np.abs(layer.W.data).max() <= 0.08
        assert np.array_equal(layer.b.data, np.zeros(40))
        conv = Conv2DLayer(3, 8, 3, rng)
        assert np.abs(conv.kernels.data).max() <= 0.08

    def test_embedding_lookup_is_column(self):
        rng = np.random.default_rng(10)
        emb = EmbeddingMatrix(6, 9, rng)
        for j in range(9):
            np.testing.assert_array_equal(emb.lookup(j).data, emb.E.data[:, j])

    def test_embedding_backward_scatters(self):
        rng = np.random.default_rng(11)
        emb = EmbeddingMatrix(3, 5, rng)
        out = emb.lookup(np.array([2, 2, 4]))
        backward(out, seed=np.ones((3, 3)))
        expected = np.zeros((3, 5))
        expected[:, 2] = 2.0
        expected[:, 4] = 1.0
        np.testing.assert_array_equal(emb.E.grad, expected)
