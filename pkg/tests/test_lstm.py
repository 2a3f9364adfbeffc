import numpy as np
import pytest

from conceptseq.autodiff import Parameter, Tensor, backward, grad_check, mul, reduce_sum
from conceptseq.lstm import (
    LSTMParams,
    LSTMState,
    decoder_step,
    lstm_cell,
    unroll_teacher_forced,
)
from conceptseq.nn import DenseLayer, EmbeddingMatrix, RMSProp, softmax_nll_sequence
from oracles import scalar_lstm_cell


def _params(rng, H=3, D=2, peepholes=False, scale=None, block="tanh"):
    p = LSTMParams(H, D, rng, peepholes=peepholes, block_activation=block)
    if scale is not None:
        for q in p.params():
            q.data[...] = rng.uniform(-scale, scale, q.data.shape)
    return p


def test_zero_params_zero_state():
    rng = np.random.default_rng(0)
    p = _params(rng)
    for q in p.params():
        q.data[...] = 0.0
    state = lstm_cell(Tensor([1.0, -2.0]), LSTMState.zeros(3), p)
    np.testing.assert_array_equal(state.c.data, np.zeros(3))
    np.testing.assert_array_equal(state.h.data, np.zeros(3))


def test_saturated_gates_carry_cell_state():
    rng = np.random.default_rng(1)
    p = _params(rng)
    for q in p.params():
        q.data[...] = 0.0
    p.b["f"].data[...] = 100.0
    p.b["i"].data[...] = -100.0
    p.b["o"].data[...] = -100.0
    prev = LSTMState(np.zeros(3), np.array([0.3, -0.7, 1.1]))
    state = lstm_cell(Tensor(np.zeros(2)), prev, p)
    np.testing.assert_allclose(state.c.data, prev.c.data, atol=1e-12)
    np.testing.assert_allclose(state.h.data, np.zeros(3), atol=1e-12)


@pytest.mark.parametrize("peepholes", [False, True])
def test_cell_matches_scalar_loop_oracle(peepholes):
    rng = np.random.default_rng(2)
    for _ in range(10):
        p = _params(rng, H=4, D=3, peepholes=peepholes, scale=1.0)
        x = rng.standard_normal(3)
        h0 = rng.standard_normal(4) * 0.5
        c0 = rng.standard_normal(4) * 0.5
        state = lstm_cell(Tensor(x), LSTMState(h0.copy(), c0.copy()), p)
        h_ref, c_ref = scalar_lstm_cell(x.tolist(), h0.tolist(), c0.tolist(), p)
        np.testing.assert_allclose(state.h.data, h_ref, atol=1e-12, rtol=0)
        np.testing.assert_allclose(state.c.data, c_ref, atol=1e-12, rtol=0)


def test_relu_block_activation():
    rng = np.random.default_rng(3)
    p = _params(rng, peepholes=False, scale=1.0, block="relu")
    x = rng.standard_normal(2)
    state = lstm_cell(Tensor(x), LSTMState.zeros(3), p)
    h_ref, c_ref = scalar_lstm_cell(x.tolist(), [0.0] * 3, [0.0] * 3, p)
    np.testing.assert_allclose(state.h.data, h_ref, atol=1e-12, rtol=0)
    np.testing.assert_allclose(state.c.data, c_ref, atol=1e-12, rtol=0)


def test_unknown_block_activation_rejected():
    with pytest.raises(ValueError):
        LSTMParams(3, 2, np.random.default_rng(0), block_activation="gelu")


@pytest.mark.parametrize("peepholes", [False, True])
def test_cell_gradients(peepholes):
    from conceptseq.autodiff import add

    rng = np.random.default_rng(4)
    p = _params(rng, peepholes=peepholes, scale=0.8)
    x = rng.standard_normal(2)
    prev = LSTMState(rng.standard_normal(3) * 0.5, rng.standard_normal(3) * 0.5)
    wh, wc = rng.standard_normal(3), rng.standard_normal(3)

    def loss():
        st = lstm_cell(Tensor(x), prev, p)
        return add(reduce_sum(mul(st.h, Tensor(wh))), reduce_sum(mul(st.c, Tensor(wc))))

    assert grad_check(loss, p.params(), eps=1e-5) < 1e-4


def test_disabled_peepholes_are_inert():
    rng = np.random.default_rng(5)
    p = _params(rng, peepholes=False, scale=0.5)
    x = rng.standard_normal(2)
    prev = LSTMState(rng.standard_normal(3), rng.standard_normal(3))
    base = lstm_cell(Tensor(x), prev, p)
    # randomise the (unused) peephole weights, then re-zero them
    for gate in "ifog":
        p.w_c[gate].data[...] = rng.standard_normal((3, 3))
    scrambled = lstm_cell(Tensor(x), prev, p)
    np.testing.assert_array_equal(base.h.data, scrambled.h.data)
    np.testing.assert_array_equal(base.c.data, scrambled.c.data)
    for gate in "ifog":
        p.w_c[gate].data[...] = 0.0
    again = lstm_cell(Tensor(x), prev, p)
    np.testing.assert_array_equal(base.h.data, again.h.data)
    assert all(p.w_c[g] not in p.params() for g in "ifog")


def test_batched_cell_matches_rows():
    rng = np.random.default_rng(6)
    p = _params(rng, scale=0.7)
    X = rng.standard_normal((5, 2))
    H0 = rng.standard_normal((5, 3))
    C0 = rng.standard_normal((5, 3))
    batch = lstm_cell(Tensor(X), LSTMState(H0, C0), p)
    for i in range(5):
        single = lstm_cell(Tensor(X[i]), LSTMState(H0[i], C0[i]), p)
        np.testing.assert_allclose(batch.h.data[i], single.h.data, atol=1e-12)
        np.testing.assert_allclose(batch.c.data[i], single.c.data, atol=1e-12)


def _decoder(rng, V=6, H=4, D=3, scale=0.6):
    p = _params(rng, H=H, D=D, scale=scale)
    embed = EmbeddingMatrix(D, V, rng)
    out = DenseLayer(H, V, rng)
    for q in embed.params() + out.params():
        q.data[...] = rng.uniform(-scale, scale, q.data.shape)
    return p, embed, out


class TestDecoderStep:
    def test_output_is_distribution(self):
        rng = np.random.default_rng(7)
        p, embed, out = _decoder(rng)
        y, _ = decoder_step(2, LSTMState.zeros(4), embed, out, p)
        assert abs(y.data.sum() - 1.0) < 1e-12

    def test_zero_params_give_uniform(self):
        rng = np.random.default_rng(8)
        p, embed, out = _decoder(rng, scale=0.0)
        for q in embed.params() + out.params():
            q.data[...] = 0.0
        y, _ = decoder_step(1, LSTMState.zeros(4), embed, out, p)
        np.testing.assert_allclose(y.data, np.full(6, 1 / 6), atol=1e-15)

    def test_composes_from_primitive_ops(self):
        from conceptseq.autodiff import softmax

        rng = np.random.default_rng(9)
        p, embed, out = _decoder(rng)
        prev = LSTMState(rng.standard_normal(4), rng.standard_normal(4))
        y, state = decoder_step(3, prev, embed, out, p)
        x = embed.lookup(3)
        manual_state = lstm_cell(x, prev, p)
        manual_y = softmax(out(manual_state.h))
        np.testing.assert_array_equal(y.data, manual_y.data)
        np.testing.assert_array_equal(state.h.data, manual_state.h.data)

    def test_token_out_of_range(self):
        rng = np.random.default_rng(10)
        p, embed, out = _decoder(rng)
        from conceptseq.autodiff import ShapeError

        with pytest.raises(ShapeError):
            decoder_step(6, LSTMState.zeros(4), embed, out, p)


class TestUnroll:
    def test_single_step_sequence(self):
        rng = np.random.default_rng(11)
        p, embed, out = _decoder(rng)
        logits = unroll_teacher_forced(LSTMState.zeros(4), [5], embed, out, p, 4)
        assert logits.shape == (1, 6)

    def test_empty_sequence_rejected(self):
        rng = np.random.default_rng(12)
        p, embed, out = _decoder(rng)
        with pytest.raises(ValueError):
            unroll_teacher_forced(LSTMState.zeros(4), [], embed, out, p, 4)

    def test_length_covariance(self):
        rng = np.random.default_rng(13)
        p, embed, out = _decoder(rng)
        state = LSTMState(rng.standard_normal(4), rng.standard_normal(4))
        full = unroll_teacher_forced(state, [1, 2, 0, 5], embed, out, p, 4)
        prefix = unroll_teacher_forced(state, [1, 2], embed, out, p, 4)
        np.testing.assert_array_equal(full.data[:2], prefix.data)

    def test_nll_equals_stepwise_decoder_losses(self):
        rng = np.random.default_rng(14)
        p, embed, out = _decoder(rng)
        state = LSTMState(rng.standard_normal(4), rng.standard_normal(4))
        targets = [2, 0, 5]
        logits = unroll_teacher_forced(state, targets, embed, out, p, 4)
        total = softmax_nll_sequence(logits, targets).item()
        stepwise = 0.0
        st, tok = state, 4
        for t in targets:
            y, st = decoder_step(tok, st, embed, out, p)
            stepwise -= np.log(y.data[t])
            tok = t
        assert abs(total - stepwise) < 1e-12

    def test_batched_unroll_matches_singles(self):
        rng = np.random.default_rng(15)
        p, embed, out = _decoder(rng)
        H0 = rng.standard_normal((3, 4))
        targets = np.array([[1, 5], [0, 2], [3, 3]])
        batch = unroll_teacher_forced(
            LSTMState(H0, np.zeros((3, 4))), targets, embed, out, p, 4
        )
        for i in range(3):
            single = unroll_teacher_forced(
                LSTMState(H0[i], np.zeros(4)), targets[i], embed, out, p, 4
            )
            np.testing.assert_allclose(batch.data[i], single.data, atol=1e-12)

    def test_greedy_fixed_point_is_locally_optimal(self):
        # memorise one sequence, then check no single-token edit scores better
        rng = np.random.default_rng(16)
        V, H, D = 6, 8, 4
        p = LSTMParams(H, D, rng)
        embed = EmbeddingMatrix(D, V, rng)
        out = DenseLayer(H, V, rng)
        target = [2, 0, 3, 5]
        params = p.params() + embed.params() + out.params()
        opt = RMSProp(params, lr=5e-3)
        state = LSTMState.zeros(H)
        for _ in range(400):
            opt.zero_grad()
            logits = unroll_teacher_forced(state, target, embed, out, p, 4)
            loss = softmax_nll_sequence(logits, target)
            backward(loss)
            opt.step()

        def nll(seq):
            logits = unroll_teacher_forced(state, seq, embed, out, p, 4)
            return softmax_nll_sequence(logits, seq).item()

        base = nll(target)
        assert base < 0.1
        for pos in range(len(target)):
            for tok in range(V):
                if tok == target[pos]:
                    continue
                edited = list(target)
                edited[pos] = tok
                assert nll(edited) >= base
