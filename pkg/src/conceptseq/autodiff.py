"""Dense float64 tensors with a reverse-mode gradient tape.

Every op evaluates eagerly and returns a `Tensor` that remembers its
parents and how to push a gradient back to them, so the computation graph
is simply the DAG of `Tensor` objects, ordered by creation. `backward`
replays that tape in reverse creation order (creation order is always a
topological order for an eagerly built graph) and accumulates gradients
additively into `Parameter.grad`; the caller zeroes parameter gradients
between optimisation steps.

Everything is 64-bit: the models here are desk-scale and the finite
difference gradient checker needs the head-room.
"""

import itertools

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when an op receives tensors whose shapes cannot combine."""


_ids = itertools.count()


class Tensor:
    """A float64 array plus its position in the gradient tape.

    `grad_fn(g)` maps the gradient at this node to a tuple of gradients,
    one per parent (None for parents that take no gradient).
    """

    __slots__ = ("data", "grad", "op", "parents", "grad_fn", "uid")

    def __init__(self, data, parents=(), grad_fn=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self.grad_fn = grad_fn
        self.uid = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={tuple(self.shape)})"


class Parameter(Tensor):
    """Learnable leaf tensor; `grad` persists and accumulates across backward passes."""

    __slots__ = ("name",)

    def __init__(self, data, name=""):
        super().__init__(data)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={tuple(self.shape)})"


def _tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def trace(root):
    """All nodes reachable from `root`, inputs before consumers."""
    seen = {root.uid}
    nodes = [root]
    stack = [root]
    while stack:
        for p in stack.pop().parents:
            if p.uid not in seen:
                seen.add(p.uid)
                nodes.append(p)
                stack.append(p)
    nodes.sort(key=lambda n: n.uid)
    return nodes


def backward(output, seed=None):
    """Accumulate d(seed . output)/d(leaf) into every reachable Parameter.

    `seed` must match the output shape; it defaults to 1.0 for scalar
    outputs. Intermediate nodes get their gradient stored on `.grad` for
    inspection (overwritten per call); Parameters accumulate with `+=`.
    """
    if seed is None:
        if output.data.size != 1:
            raise ShapeError("backward: seed required for non-scalar output")
        seed = np.ones_like(output.data)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.data.shape:
            raise ShapeError(
                f"backward: seed shape {seed.shape} != output shape {output.data.shape}"
            )
    order = trace(output)
    flow = {output.uid: seed.copy()}
    for node in reversed(order):
        g = flow.pop(node.uid, None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
        else:
            node.grad = g
        if node.grad_fn is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None:
                continue
            acc = flow.get(parent.uid)
            flow[parent.uid] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# ops


def _unbroadcast(g, shape):
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = _tensor(a), _tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    return Tensor(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def mul(a, b):
    a, b = _tensor(a), _tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    return Tensor(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def matmul(a, b, transpose_a=False, transpose_b=False):
    """Matrix product of 1-D/2-D tensors; transpose flags apply to 2-D args."""
    a, b = _tensor(a), _tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: expected 1-D/2-D args, got {a.shape} and {b.shape}")
    if (transpose_a and a.ndim != 2) or (transpose_b and b.ndim != 2):
        raise ShapeError("matmul: transpose flag on a 1-D argument")
    A = a.data.T if transpose_a else a.data
    B = b.data.T if transpose_b else b.data
    if A.shape[-1] != B.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree, {A.shape} @ {B.shape}")
    out = A @ B

    def grad_fn(g):
        A2 = A if A.ndim == 2 else A[None, :]
        B2 = B if B.ndim == 2 else B[:, None]
        g2 = g.reshape(A2.shape[0], B2.shape[1])
        gA = g2 @ B2.T
        gB = A2.T @ g2
        if A.ndim == 1:
            gA = gA[0]
        if B.ndim == 1:
            gB = gB[:, 0]
        if transpose_a:
            gA = gA.T
        if transpose_b:
            gB = gB.T
        return gA, gB

    return Tensor(out, (a, b), grad_fn, "matmul")


def sigmoid(x):
    x = _tensor(x)
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    return Tensor(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x):
    x = _tensor(x)
    y = np.tanh(x.data)
    return Tensor(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x):
    x = _tensor(x)
    mask = x.data > 0
    return Tensor(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def softmax(x):
    """Softmax over the last axis; rows are positive and sum to one."""
    x = _tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor(y, (x,), grad_fn, "softmax")


def concat(tensors, axis=0):
    tensors = [_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, tuple(tensors), grad_fn, "concat")


def narrow(x, axis, start, length):
    """Contiguous slice of `length` entries along `axis`, starting at `start`."""
    x = _tensor(x)
    if not 0 <= start <= start + length <= x.shape[axis]:
        raise ShapeError(f"slice: [{start}:{start + length}) out of range for axis {axis} of {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return Tensor(x.data[index], (x,), grad_fn, "slice")


def reshape(x, shape):
    x = _tensor(x)
    out = x.data.reshape(shape)
    return Tensor(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def reduce_sum(x):
    """Sum of all entries, as a scalar tensor."""
    x = _tensor(x)
    return Tensor(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def reduce_mean(x):
    x = _tensor(x)
    n = x.data.size
    return Tensor(
        x.data.mean(), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),), "mean"
    )


def conv2d(x, k):
    """Valid-padding stride-1 convolution of [B,Ci,H,W] with [Co,Ci,kh,kw]."""
    x, k = _tensor(x), _tensor(k)
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernels, got {x.shape}, {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch, input {x.shape} vs kernels {k.shape}")
    kh, kw = k.shape[2], k.shape[3]
    if kh % 2 == 0 or kw % 2 == 0 or kh > x.shape[2] or kw > x.shape[3]:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} invalid for input {x.shape}")
    y = kernels.conv2d_forward(x.data, k.data)

    def grad_fn(g):
        return kernels.conv2d_backward(x.data, k.data, g)

    return Tensor(y, (x, k), grad_fn, "conv2d")


def maxpool2(x):
    """2x2 stride-2 max pool over [B,C,H,W]; odd trailing rows/cols are cropped."""
    x = _tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2: expected 4-D input, got {x.shape}")
    y, idx = kernels.maxpool2_forward(x.data)
    H, W = x.shape[2], x.shape[3]

    def grad_fn(g):
        return (kernels.maxpool2_backward(idx, g, H, W),)

    return Tensor(y, (x,), grad_fn, "maxpool2")


def embed_lookup(E, ids):
    """Select columns of an embedding matrix [D, V] by token id.

    A scalar id yields the column as a [D] vector (exactly E @ onehot(id));
    an id array of shape [B] yields the stacked rows [B, D].
    """
    E = _tensor(E)
    if E.ndim != 2:
        raise ShapeError(f"embed: expected 2-D matrix, got {E.shape}")
    scalar = np.isscalar(ids) or getattr(ids, "ndim", 0) == 0
    idx = np.atleast_1d(np.asarray(ids, dtype=np.int64))
    if idx.size and (idx.min() < 0 or idx.max() >= E.shape[1]):
        raise ShapeError(f"embed: token id out of range for vocabulary {E.shape[1]}")
    out = E.data[:, idx].T
    if scalar:
        out = out[0]

    def grad_fn(g):
        gE = np.zeros_like(E.data)
        rows = g[None, :] if scalar else g
        for n, j in enumerate(idx):
            gE[:, j] += rows[n]
        return (gE,)

    return Tensor(out, (E,), grad_fn, "embed")


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(loss_fn, params, eps=1e-5):
    """Max relative error between tape gradients and central differences.

    `loss_fn` must be deterministic and return a scalar Tensor built from
    `params`. For each parameter entry the numeric derivative is
    (f(p+eps) - f(p-eps)) / 2eps and the error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError(f"grad_check: eps must be in (0, 1e-3], got {eps}")
    params = list(params)
    for p in params:
        p.zero_grad()
    out = loss_fn()
    if out.data.size != 1:
        raise ShapeError("grad_check: loss must be scalar")
    backward(out)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(loss_fn().data)
            flat[i] = orig - eps
            lo = float(loss_fn().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
