"""Layers, losses, and the RMSProp optimiser shared by all models.

Layers accept either a single example (vector / [C,H,W] image) or a
leading batch axis; parameters are initialised uniformly in
[-0.08, 0.08] with zero biases, from an explicitly passed generator so
runs are reproducible.
"""

import numpy as np

from .autodiff import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    conv2d,
    embed_lookup,
    matmul,
    maxpool2,
    relu,
    reshape,
)

INIT_RANGE = 0.08
PROB_CLAMP = 1e-7


def uniform_init(rng, *shape):
    return rng.uniform(-INIT_RANGE, INIT_RANGE, shape)


class DenseLayer:
    """Affine map with weight [out, in] and bias [out]."""

    def __init__(self, n_in, n_out, rng, name="dense"):
        self.n_in, self.n_out = n_in, n_out
        self.W = Parameter(uniform_init(rng, n_out, n_in), f"{name}.W")
        self.b = Parameter(np.zeros(n_out), f"{name}.b")

    def __call__(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim == 1:
            return add(matmul(self.W, x), self.b)
        return add(matmul(x, self.W, transpose_b=True), self.b)

    def params(self):
        return [self.W, self.b]


class Conv2DLayer:
    """Valid-padding stride-1 convolution with odd square kernels."""

    def __init__(self, n_in, n_out, ksize, rng, name="conv"):
        if ksize % 2 == 0:
            raise ShapeError(f"{name}: kernel size must be odd, got {ksize}")
        self.n_in, self.n_out, self.ksize = n_in, n_out, ksize
        self.kernels = Parameter(uniform_init(rng, n_out, n_in, ksize, ksize), f"{name}.kernels")
        self.b = Parameter(np.zeros(n_out), f"{name}.b")

    def __call__(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        single = x.ndim == 3
        if single:
            x = reshape(x, (1,) + tuple(x.shape))
        y = conv2d(x, self.kernels)
        y = add(y, reshape(self.b, (self.n_out, 1, 1)))
        if single:
            y = reshape(y, tuple(y.shape)[1:])
        return y

    def params(self):
        return [self.kernels, self.b]


class EmbeddingMatrix:
    """Token embedding stored column-wise: [embed_dim, vocab_size]."""

    def __init__(self, dim, vocab_size, rng, name="embed"):
        self.dim, self.vocab_size = dim, vocab_size
        self.E = Parameter(uniform_init(rng, dim, vocab_size), f"{name}.E")

    def lookup(self, ids):
        return embed_lookup(self.E, ids)

    def params(self):
        return [self.E]


# ---------------------------------------------------------------------------
# losses (primitive ops: both fold softmax/log internally for stability)


def sigmoid_ce_loss(targets, probs):
    """Summed binary cross entropy -sum t*log(p) + (1-t)*log(1-p).

    `targets` is a constant 0/1 array; `probs` is a tensor of
    probabilities, clamped to [1e-7, 1-1e-7] before the logs.
    """
    if not isinstance(probs, Tensor):
        probs = Tensor(probs)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != probs.shape:
        raise ShapeError(f"sigmoid_ce_loss: targets {t.shape} vs predictions {probs.shape}")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("sigmoid_ce_loss: targets must be 0/1")
    c = np.clip(probs.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -(t * np.log(c) + (1.0 - t) * np.log(1.0 - c)).sum()
    interior = (probs.data > PROB_CLAMP) & (probs.data < 1.0 - PROB_CLAMP)

    def grad_fn(g):
        return (g * interior * (c - t) / (c * (1.0 - c)),)

    return Tensor(loss, (probs,), grad_fn, "sigmoid_ce")


def softmax_nll_sequence(logits, targets):
    """Sum over steps of -log softmax(logits_t)[target_t].

    `logits` is [T, V] (one sequence) or [B, T, V] (equal-length batch);
    `targets` holds the matching token ids.
    """
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    tgt = np.asarray(targets, dtype=np.int64)
    if logits.ndim not in (2, 3) or tgt.shape != logits.shape[:-1]:
        raise ShapeError(f"softmax_nll: logits {logits.shape} vs targets {tgt.shape}")
    V = logits.shape[-1]
    if tgt.size and (tgt.min() < 0 or tgt.max() >= V):
        raise ValueError(f"softmax_nll: target id out of range for vocabulary {V}")
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(z, tgt[..., None], axis=-1)
    loss = (lse - picked).sum()

    def grad_fn(g):
        soft = np.exp(z - lse)
        if soft.ndim == 2:
            soft[np.arange(soft.shape[0]), tgt] -= 1.0
        else:
            B, T = soft.shape[0], soft.shape[1]
            soft[np.arange(B)[:, None], np.arange(T)[None, :], tgt] -= 1.0
        return (g * soft,)

    return Tensor(loss, (logits,), grad_fn, "softmax_nll")


# ---------------------------------------------------------------------------
# optimiser


class RMSProp:
    """Per-entry step p <- p - lr * g / sqrt(ms + eps), ms <- decay*ms + (1-decay)*g^2."""

    def __init__(self, params, lr=1e-3, decay=0.9, eps=1e-8):
        self.params = list(params)
        self.lr, self.decay, self.eps = lr, decay, eps
        self.ms = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p, ms in zip(self.params, self.ms):
            g = p.grad
            ms *= self.decay
            ms += (1.0 - self.decay) * g * g
            p.data -= self.lr * g / np.sqrt(ms + self.eps)


def rmsprop_step(param_arrays, grad_arrays, ms_arrays, lr=1e-3, decay=0.9, eps=1e-8):
    """Functional single step on raw arrays, updated in place."""
    for p, g, ms in zip(param_arrays, grad_arrays, ms_arrays):
        ms *= decay
        ms += (1.0 - decay) * g * g
        p -= lr * g / np.sqrt(ms + eps)
