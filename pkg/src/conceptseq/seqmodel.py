"""Full annotation model: a unary concept predictor feeding an LSTM
decoder through an interface embedding, trained with a deeply supervised
joint loss L = L_u + L_r.

Interface variants:

 * ``semantic-prediction`` (the main model): the decoder is conditioned
   on the predicted concept probabilities, and those probabilities also
   receive direct concept supervision (L_u). Because the interface has a
   ground-truth value, the decoder can be pretrained on true concept
   vectors, in parallel with the unary model.
 * ``feature-deeply-supervised``: the decoder consumes the penultimate
   CNN feature layer; a prediction head on the same features still
   receives L_u, so the features are deeply supervised but not
   themselves semantic.
 * ``feature-unsupervised``: the decoder consumes the features and L_u
   is dropped entirely (the conventional encoder/decoder baseline).

Joint training always feeds the decoder the live interface value (the
prediction, not the ground truth); feeding ground truth is exactly what
the decoder pretraining stage does.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, backward, mul, narrow, sigmoid
from .labelseq import rare_first_order
from .lstm import LSTMParams, LSTMState, unroll_teacher_forced
from .nn import DenseLayer, EmbeddingMatrix, RMSProp, sigmoid_ce_loss, softmax_nll_sequence
from .synthdata import caption_concept_set, concept_vector, tag_vector
from .unary import UnaryModel

VARIANTS = ("semantic-prediction", "feature-deeply-supervised", "feature-unsupervised")


@dataclass
class JointLossReport:
    """Per-sample-mean loss terms; L is exactly L_u + L_r (with unit weight)."""

    L_u: float
    L_r: float
    L: float


@dataclass
class Example:
    """One training-ready datum: image, 0/1 concept vector, optional 0/1
    tag vector, and the target token sequence (ends with the END id)."""

    image: np.ndarray
    concepts: np.ndarray
    tags: np.ndarray
    target: list


class SCRModel:
    """Unary model + interface projection + LSTM decoder + output layer."""

    def __init__(self, unary, init_proj, lstm, embed, out, variant="semantic-prediction"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown interface variant {variant!r}")
        if unary is not None:
            expected = (
                unary.predictor.n_concepts
                if variant == "semantic-prediction"
                else unary.predictor.feature_width
            )
            if init_proj.n_in != expected:
                raise ValueError(
                    f"{variant}: interface projection expects width {init_proj.n_in}, "
                    f"the unary model provides {expected}"
                )
        self.unary = unary
        self.init_proj = init_proj
        self.lstm = lstm
        self.embed = embed
        self.out = out
        self.variant = variant

    def decoder_params(self):
        return (
            self.init_proj.params()
            + self.lstm.params()
            + self.embed.params()
            + self.out.params()
        )

    def params(self):
        unary = self.unary.params() if self.unary is not None else []
        return unary + self.decoder_params()

    def named_params(self):
        """Every parameter (including disabled peepholes) keyed by name."""
        ps = self.unary.params() if self.unary is not None else []
        ps = ps + self.init_proj.params() + self.lstm.all_params()
        ps = ps + self.embed.params() + self.out.params()
        return [(p.name, p) for p in ps]


def init_state_from_embedding(embedding, init_proj):
    """h0 = projection of the interface embedding, c0 = 0."""
    if not isinstance(embedding, Tensor):
        embedding = Tensor(embedding)
    h0 = init_proj(embedding)
    return LSTMState(h0, Tensor(np.zeros_like(h0.data)))


def interface_embedding(model, images, tags=None):
    """The tensor handed to the decoder, plus the supervised prediction
    (None for the unsupervised variant)."""
    if model.variant == "semantic-prediction":
        s_hat = model.unary.predict_concepts(images, tags)
        return s_hat, s_hat
    if tags is not None:
        raise ValueError("side-information fusion is defined on the prediction layer; "
                         "feature-interface variants take images only")
    features = model.unary.predictor.features(images)
    if model.variant == "feature-deeply-supervised":
        return features, sigmoid(model.unary.predictor.head(features))
    return features, None


def prepare_examples(samples, concept_vocab, task="multilabel", word_vocab=None,
                     order="rare-first", with_tags=False):
    """Convert generator samples into training examples for a task.

    Multi-label targets are the rare-first ordering of the concept set
    over `concept_vocab`; caption targets are the caption word ids over
    `word_vocab` plus END, with concepts marking which vocabulary words
    the caption mentions.
    """
    out = []
    for s in samples:
        tags = tag_vector(s) if with_tags else None
        if task == "multilabel":
            target = rare_first_order(s.concepts, concept_vocab, order=order)
            concepts = concept_vector(s, concept_vocab)
        elif task == "caption":
            if word_vocab is None:
                raise ValueError("caption task needs a word vocabulary")
            target = [word_vocab.id_of(w) for w in s.caption] + [word_vocab.end_id]
            mentioned = caption_concept_set(s, concept_vocab)
            concepts = np.zeros(len(concept_vocab.labels))
            for w in mentioned:
                concepts[concept_vocab.id_of(w)] = 1.0
        else:
            raise ValueError(f"unknown task {task!r}")
        out.append(Example(s.image, concepts, tags, target))
    return out


def _length_groups(examples):
    """Contiguous (start, count, T) runs of equal target length; examples
    must already be sorted by target length."""
    groups = []
    start = 0
    while start < len(examples):
        T = len(examples[start].target)
        count = 1
        while start + count < len(examples) and len(examples[start + count].target) == T:
            count += 1
        groups.append((start, count, T))
        start += count
    return groups


def _batch_tensors(examples, use_tags):
    images = Tensor(np.stack([e.image for e in examples]))
    concepts = np.stack([e.concepts for e in examples])
    tags = Tensor(np.stack([e.tags for e in examples])) if use_tags else None
    return images, concepts, tags


def _relational_loss(state_h, examples_sorted, embed, out, lstm_params, start_token):
    """Summed sequence NLL over length-grouped rows of the initial state;
    examples must be sorted by target length."""
    zeros = Tensor(np.zeros_like(state_h.data))
    total = None
    for start, count, _ in _length_groups(examples_sorted):
        h = narrow(state_h, 0, start, count)
        c = narrow(zeros, 0, start, count)
        tgt = np.array([examples_sorted[i].target for i in range(start, start + count)],
                       dtype=np.int64)
        logits = unroll_teacher_forced(LSTMState(h, c), tgt, embed, out, lstm_params,
                                       start_token)
        nll = softmax_nll_sequence(logits, tgt)
        total = nll if total is None else add(total, nll)
    return total


def joint_loss_graph(model, examples, start_token, lambda_u=1.0):
    """(loss tensor, report) over a batch; terms are per-sample means."""
    if not examples:
        raise ValueError("joint loss of an empty batch")
    for e in examples:
        if e.concepts is None or e.target is None:
            raise ValueError("joint loss needs ground-truth concepts and a target path")
    examples = sorted(examples, key=lambda e: len(e.target))
    use_tags = model.unary is not None and model.unary.side is not None
    images, concepts, tags = _batch_tensors(examples, use_tags)
    n = len(examples)

    embedding, s_hat = interface_embedding(model, images, tags)
    state = init_state_from_embedding(embedding, model.init_proj)
    l_r = mul(
        _relational_loss(state.h, examples, model.embed, model.out, model.lstm, start_token),
        1.0 / n,
    )
    if s_hat is None:
        report = JointLossReport(L_u=0.0, L_r=float(l_r.data), L=float(l_r.data))
        return l_r, report
    l_u = mul(sigmoid_ce_loss(concepts, s_hat), 1.0 / n)
    loss = add(mul(l_u, lambda_u), l_r)
    report = JointLossReport(L_u=float(l_u.data), L_r=float(l_r.data), L=float(loss.data))
    return loss, report


def joint_loss(model, sample, start_token, lambda_u=1.0):
    """Loss report for a single example (see `joint_loss_graph`)."""
    _, report = joint_loss_graph(model, [sample], start_token, lambda_u)
    return report


def pretrain_rnn(examples, vocab_size, start_token, rng, hidden=64, embed_dim=32,
                 steps=1500, batch_size=32, lr=1e-3, peepholes=False,
                 block_activation="tanh", variant="semantic-prediction"):
    """Stage-one decoder training on ground-truth concept vectors.

    Only the semantic-prediction interface has a ground-truth embedding,
    so only it can pretrain the decoder. Returns
    (init_proj, lstm, embed, out, per-step mean loss history).
    """
    if variant != "semantic-prediction":
        raise ValueError(f"{variant}: no ground-truth interface value exists, "
                         "decoder pretraining is only defined for semantic-prediction")
    if not examples:
        raise ValueError("pretrain_rnn: empty dataset")
    k = examples[0].concepts.shape[0]
    init_proj = DenseLayer(k, hidden, rng, "init_proj")
    lstm = LSTMParams(hidden, embed_dim, rng, peepholes=peepholes,
                      block_activation=block_activation, name="lstm")
    embed = EmbeddingMatrix(embed_dim, vocab_size, rng, "embed")
    out = DenseLayer(hidden, vocab_size, rng, "out")
    opt = RMSProp(init_proj.params() + lstm.params() + embed.params() + out.params(), lr=lr)

    history = []
    n = len(examples)
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        batch = sorted((examples[i] for i in idx), key=lambda e: len(e.target))
        s_true = Tensor(np.stack([e.concepts for e in batch]))
        state = init_state_from_embedding(s_true, init_proj)
        loss = mul(_relational_loss(state.h, batch, embed, out, lstm, start_token),
                   1.0 / len(batch))
        opt.zero_grad()
        backward(loss)
        opt.step()
        history.append(float(loss.data))
    return init_proj, lstm, embed, out, history


def train_joint(model, examples, iterations, start_token, rng, batch_size=32,
                lr=3e-4, lambda_u=1.0):
    """Stage-two training of the whole model on the joint loss.

    Returns a history of (iteration, L_u, L_r, L) rows, one per step.
    """
    if not examples:
        raise ValueError("train_joint: empty dataset")
    opt = RMSProp(model.params(), lr=lr)
    history = []
    n = len(examples)
    for it in range(iterations):
        idx = rng.integers(0, n, size=min(batch_size, n))
        batch = [examples[i] for i in idx]
        loss, report = joint_loss_graph(model, batch, start_token, lambda_u)
        opt.zero_grad()
        backward(loss)
        opt.step()
        history.append((it, report.L_u, report.L_r, report.L))
    return history
