"""LSTM cell with optional peephole terms, plus the step/unroll decoders.

The cell computes, for gates i (input), f (forget), o (output) and the
block input g:

    z_gate = W_h . h_prev + [W_c . c_prev] + W_x . x + b
    i, f, o = sigmoid(z_i), sigmoid(z_f), sigmoid(z_o)
    g       = act(z_g)            (tanh by default, relu selectable)
    c       = f * c_prev + i * g
    h       = o * tanh(c)

The bracketed peephole terms W_c are only evaluated when enabled; when
disabled the matrices are kept at exactly zero and excluded from
training, so the cell matches a plain LSTM.

States are [H] vectors or [B, H] batches; weights are stored row-major
([H, H] recurrent, [H, D] input) and work for both layouts.
"""

import numpy as np

from .autodiff import Parameter, Tensor, add, matmul, mul, relu, sigmoid, softmax, tanh
from .nn import uniform_init

GATES = ("i", "f", "o", "g")
BLOCK_ACTIVATIONS = {"tanh": tanh, "relu": relu}


class LSTMState:
    """Hidden and cell state tensors of one LSTM."""

    __slots__ = ("h", "c")

    def __init__(self, h, c):
        self.h = h if isinstance(h, Tensor) else Tensor(h)
        self.c = c if isinstance(c, Tensor) else Tensor(c)

    @staticmethod
    def zeros(hidden_size, batch=None):
        shape = (hidden_size,) if batch is None else (batch, hidden_size)
        return LSTMState(np.zeros(shape), np.zeros(shape))


class LSTMParams:
    """All weights of one cell: per gate W_h [H,H], W_c [H,H], W_x [H,D], b [H]."""

    def __init__(self, hidden_size, input_size, rng, peepholes=False,
                 block_activation="tanh", name="lstm"):
        if block_activation not in BLOCK_ACTIVATIONS:
            raise ValueError(f"block_activation must be one of {sorted(BLOCK_ACTIVATIONS)}")
        self.hidden_size = hidden_size
        self.input_size = input_size
        self.peepholes = peepholes
        self.block_activation = block_activation
        self.w_h, self.w_c, self.w_x, self.b = {}, {}, {}, {}
        for gate in GATES:
            self.w_h[gate] = Parameter(uniform_init(rng, hidden_size, hidden_size),
                                       f"{name}.{gate}.w_h")
            peep = uniform_init(rng, hidden_size, hidden_size) if peepholes else \
                np.zeros((hidden_size, hidden_size))
            self.w_c[gate] = Parameter(peep, f"{name}.{gate}.w_c")
            self.w_x[gate] = Parameter(uniform_init(rng, hidden_size, input_size),
                                       f"{name}.{gate}.w_x")
            self.b[gate] = Parameter(np.zeros(hidden_size), f"{name}.{gate}.b")

    def params(self):
        """Trainable parameters; peephole matrices only when enabled."""
        out = []
        for gate in GATES:
            out.extend([self.w_h[gate], self.w_x[gate], self.b[gate]])
            if self.peepholes:
                out.append(self.w_c[gate])
        return out

    def all_params(self):
        """Every parameter including disabled (zero) peepholes, for checkpoints."""
        out = []
        for gate in GATES:
            out.extend([self.w_h[gate], self.w_c[gate], self.w_x[gate], self.b[gate]])
        return out


def _affine(v, W):
    if v.ndim == 1:
        return matmul(W, v)
    return matmul(v, W, transpose_b=True)


def lstm_cell(x, prev, params):
    """One forward step; `x` is [D] or [B,D], `prev` the matching state."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    act = BLOCK_ACTIVATIONS[params.block_activation]
    pre = {}
    for gate in GATES:
        z = add(add(_affine(prev.h, params.w_h[gate]), _affine(x, params.w_x[gate])),
                params.b[gate])
        if params.peepholes:
            z = add(z, _affine(prev.c, params.w_c[gate]))
        pre[gate] = z
    i = sigmoid(pre["i"])
    f = sigmoid(pre["f"])
    o = sigmoid(pre["o"])
    g = act(pre["g"])
    c = add(mul(f, prev.c), mul(i, g))
    h = mul(o, tanh(c))
    return LSTMState(h, c)


def decoder_step(prev_token, prev, embed, out_layer, params):
    """Embed the previous token, step the cell, return (probabilities, state)."""
    x = embed.lookup(prev_token)
    state = lstm_cell(x, prev, params)
    y = softmax(out_layer(state.h))
    return y, state


def unroll_teacher_forced(start_state, targets, embed, out_layer, params, start_token):
    """Teacher-forced unroll: step t consumes target t-1 (the start token at
    t=0) and emits the logits that score target t.

    `targets` is a 1-D id sequence (returns [T, V] logits) or a [B, T]
    array of equal-length sequences (returns [B, T, V]).
    """
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.ndim not in (1, 2) or tgt.shape[-1] < 1:
        raise ValueError("unroll: target sequence must be non-empty")
    batched = tgt.ndim == 2
    T = tgt.shape[-1]
    if batched:
        starts = np.full((tgt.shape[0], 1), start_token, dtype=np.int64)
        inputs = np.concatenate([starts, tgt[:, :-1]], axis=1)
    else:
        inputs = np.concatenate([[start_token], tgt[:-1]])

    from .autodiff import concat, reshape  # local import keeps module header lean

    state = start_state
    steps = []
    for t in range(T):
        token = inputs[:, t] if batched else int(inputs[t])
        x = embed.lookup(token)
        state = lstm_cell(x, state, params)
        logits = out_layer(state.h)
        if batched:
            steps.append(reshape(logits, (tgt.shape[0], 1, logits.shape[-1])))
        else:
            steps.append(reshape(logits, (1, logits.shape[-1])))
    return concat(steps, axis=1 if batched else 0)
