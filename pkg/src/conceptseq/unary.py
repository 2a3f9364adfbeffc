"""Per-concept predictors: a small CNN over scene images, an optional MLP
over noisy tags, and their logit-sum fusion.

The CNN is intentionally modest (two 3x3 conv layers of 8 and 16
channels, each followed by relu and a 2x2 max-pool, then one dense layer
to k concept logits): the smallest stack that solves the synthetic
scenes while leaving head-room for a relational decoder to improve on
it. Fusion adds tag logits to image logits *before* the sigmoid, so a
missing tag branch is exactly the zero-logit special case.
"""

import numpy as np

from .autodiff import Tensor, add, backward, mul, relu, reshape, sigmoid
from .nn import Conv2DLayer, DenseLayer, RMSProp, sigmoid_ce_loss


class ConceptPredictor:
    """conv(3->8) relu pool, conv(8->16) relu pool, dense(features -> k logits)."""

    def __init__(self, grid, n_concepts, rng, channels=(8, 16), ksize=3, name="unary"):
        self.grid = grid
        self.n_concepts = n_concepts
        self.channels = tuple(channels)
        c1, c2 = self.channels
        self.conv1 = Conv2DLayer(3, c1, ksize, rng, f"{name}.conv1")
        self.conv2 = Conv2DLayer(c1, c2, ksize, rng, f"{name}.conv2")
        side = (grid - ksize + 1) // 2
        side = (side - ksize + 1) // 2
        if side < 1:
            raise ValueError(f"grid {grid} too small for the conv stack")
        self.feature_width = c2 * side * side
        self.fc = DenseLayer(self.feature_width, n_concepts, rng, f"{name}.fc")

    def features(self, images):
        """Penultimate feature vector(s): [F] for one image, [B, F] batched."""
        from .autodiff import maxpool2

        x = images if isinstance(images, Tensor) else Tensor(images)
        single = x.ndim == 3
        if single:
            x = reshape(x, (1,) + tuple(x.shape))
        x = maxpool2(relu(self.conv1(x)))
        x = maxpool2(relu(self.conv2(x)))
        x = reshape(x, (x.shape[0], self.feature_width))
        if single:
            x = reshape(x, (self.feature_width,))
        return x

    def head(self, features):
        """Concept logits from an already computed feature vector."""
        return self.fc(features)

    def image_logits(self, images):
        return self.fc(self.features(images))

    def params(self):
        return self.conv1.params() + self.conv2.params() + self.fc.params()


class SideInfoMLP:
    """Tag-vector to concept logits: one 256-unit relu hidden layer."""

    HIDDEN = 256

    def __init__(self, n_tags, n_concepts, rng, name="side"):
        self.n_tags = n_tags
        self.n_concepts = n_concepts
        self.fc1 = DenseLayer(n_tags, self.HIDDEN, rng, f"{name}.fc1")
        self.fc2 = DenseLayer(self.HIDDEN, n_concepts, rng, f"{name}.fc2")

    def __call__(self, tags):
        return self.fc2(relu(self.fc1(tags)))

    def params(self):
        return self.fc1.params() + self.fc2.params()


class UnaryModel:
    """Concept predictor plus optional side-information branch."""

    def __init__(self, predictor, side=None):
        self.predictor = predictor
        self.side = side

    def concept_logits(self, images, tags=None):
        logits = self.predictor.image_logits(images)
        if tags is not None:
            if self.side is None:
                raise ValueError("model has no side-information branch for tags")
            logits = add(logits, self.side(tags))
        return logits

    def predict_concepts(self, images, tags=None):
        """Concept probabilities in (0,1)^k; with tags, the logit-sum fusion."""
        return sigmoid(self.concept_logits(images, tags))

    def params(self):
        out = self.predictor.params()
        if self.side is not None:
            out += self.side.params()
        return out


def predict_concepts(model, images, tags=None):
    return model.predict_concepts(images, tags)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def pretrain_side_mlp(mlp, tag_matrix, concept_matrix, steps, batch_size, lr, rng):
    """Train the tag branch alone to predict true concepts from noisy tags."""
    opt = RMSProp(mlp.params(), lr=lr)
    n = tag_matrix.shape[0]
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        opt.zero_grad()
        loss = sigmoid_ce_loss(concept_matrix[idx], sigmoid(mlp(Tensor(tag_matrix[idx]))))
        backward(loss)
        opt.step()


def train_unary(model, images, concepts, epochs, rng, tags=None, batch_size=32, lr=1e-3):
    """Minimise the mean concept cross entropy for `epochs` passes.

    Works on a fresh or already trained model; returns the per-epoch mean
    loss curve (per sample, summed over concepts).
    """
    images = np.asarray(images, dtype=np.float64)
    concepts = np.asarray(concepts, dtype=np.float64)
    n = images.shape[0]
    if n == 0:
        raise ValueError("train_unary: empty dataset")
    if tags is not None:
        tags = np.asarray(tags, dtype=np.float64)
    opt = RMSProp(model.params(), lr=lr)
    curve = []
    for _ in range(epochs):
        total, seen = 0.0, 0
        for idx in _batches(n, batch_size, rng):
            opt.zero_grad()
            tag_batch = Tensor(tags[idx]) if tags is not None else None
            probs = model.predict_concepts(Tensor(images[idx]), tag_batch)
            loss = sigmoid_ce_loss(concepts[idx], probs)
            backward(mul(loss, 1.0 / len(idx)))
            opt.step()
            total += float(loss.data)
            seen += len(idx)
        curve.append(total / seen)
    return curve


def pretrain_unary(images, concepts, epochs, rng, tags=None, batch_size=32, lr=1e-3,
                   channels=(8, 16), side_pretrain_steps=300):
    """Stage-one training of a fresh unary model on ground-truth concepts.

    `images` is [N, 3, G, G], `concepts` the matching [N, k] 0/1 matrix,
    and `tags` an optional [N, T] 0/1 matrix that switches on the side
    branch (pretrained alone first, then trained jointly with the CNN on
    the fused prediction). Returns (model, per-epoch mean loss curve).
    """
    images = np.asarray(images, dtype=np.float64)
    concepts = np.asarray(concepts, dtype=np.float64)
    if images.shape[0] == 0:
        raise ValueError("pretrain_unary: empty dataset")
    k = concepts.shape[1]
    predictor = ConceptPredictor(images.shape[2], k, rng, channels=channels)
    side = None
    if tags is not None:
        tags = np.asarray(tags, dtype=np.float64)
        side = SideInfoMLP(tags.shape[1], k, rng)
        pretrain_side_mlp(side, tags, concepts, side_pretrain_steps, batch_size, lr, rng)
    model = UnaryModel(predictor, side)
    curve = train_unary(model, images, concepts, epochs, rng, tags=tags,
                        batch_size=batch_size, lr=lr)
    return model, curve
