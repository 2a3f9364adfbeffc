"""Experiment orchestration shared by the CLI and the acceptance suite.

This wires the pieces into the staged protocol: pretrain the unary model
and the decoder in parallel (the decoder on ground-truth concept
vectors), assemble the full model, finetune jointly, and evaluate. The
ablation study reruns joint training for the two feature-interface
variants from the same unary pretraining with matched seeds, which is
the apples-to-apples comparison for convergence speed.
"""

import time
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tensor, grad_check, mul, reduce_mean, reduce_sum
from .decode import greedy_decode_batch
from .labelseq import sequence_to_set
from .lstm import LSTMParams, LSTMState, lstm_cell
from .metrics import corpus_bleu, multilabel_report
from .modelio import build_decoder, build_scr, clone_unary, decoder_named_params
from .nn import sigmoid_ce_loss, softmax_nll_sequence
from .seqmodel import (
    SCRModel,
    interface_embedding,
    joint_loss_graph,
    prepare_examples,
    pretrain_rnn,
    train_joint,
)
from .synthdata import DatasetSpec, caption_word_vocab, concept_vocab_from_captions, gen_dataset
from .unary import pretrain_unary, train_unary


@dataclass
class Budgets:
    """Step counts and optimiser settings for the staged protocol."""

    unary_epochs: int = 15
    baseline_extra_epochs: int = 10
    side_steps: int = 400
    rnn_steps: int = 1200
    joint_iters: int = 600
    batch_size: int = 32
    lr: float = 1e-3
    joint_lr: float = 3e-4
    hidden: int = 64
    embed_dim: int = 32
    max_len: int = 12
    peepholes: bool = False
    block_activation: str = "tanh"


def _rng(seed, stage):
    return np.random.default_rng([seed, stage])


def interface_matrix(model, examples, chunk=256):
    """Interface embeddings for a list of examples, as a [N, F] array."""
    use_tags = model.unary.side is not None
    rows = []
    for i in range(0, len(examples), chunk):
        batch = examples[i : i + chunk]
        images = Tensor(np.stack([e.image for e in batch]))
        tags = Tensor(np.stack([e.tags for e in batch])) if use_tags else None
        emb, _ = interface_embedding(model, images, tags)
        rows.append(emb.data)
    return np.concatenate(rows, axis=0)


def decoder_label_sets(model, examples, vocab, max_len, mask_emitted=True):
    emb = interface_matrix(model, examples)
    seqs = greedy_decode_batch(model, emb, max_len, mask_emitted=mask_emitted)
    return [sequence_to_set(s, vocab) for s in seqs]


def threshold_label_sets(unary_model, examples, vocab, threshold=0.5, chunk=256):
    """Per-label sigmoid baseline: predict every concept with p > threshold."""
    use_tags = unary_model.side is not None
    sets = []
    for i in range(0, len(examples), chunk):
        batch = examples[i : i + chunk]
        images = Tensor(np.stack([e.image for e in batch]))
        tags = Tensor(np.stack([e.tags for e in batch])) if use_tags else None
        probs = unary_model.predict_concepts(images, tags).data
        for row in probs:
            sets.append({vocab.labels[j] for j in np.flatnonzero(row > threshold)})
    return sets


def truth_label_sets(examples, vocab):
    return [
        {vocab.labels[j] for j in np.flatnonzero(e.concepts > 0.5)} for e in examples
    ]


def evaluate_multilabel(model, examples, vocab, max_len, mask_emitted=True):
    predictions = decoder_label_sets(model, examples, vocab, max_len, mask_emitted)
    return multilabel_report(predictions, truth_label_sets(examples, vocab), vocab.labels)


def evaluate_threshold(unary_model, examples, vocab, threshold=0.5):
    predictions = threshold_label_sets(unary_model, examples, vocab, threshold)
    return multilabel_report(predictions, truth_label_sets(examples, vocab), vocab.labels)


def iterations_to_threshold(history, tau, window=25):
    """First iteration whose trailing-window mean L_r is <= tau, else None."""
    vals = [row[2] for row in history]
    for i in range(len(vals)):
        lo = max(0, i - window + 1)
        if sum(vals[lo : i + 1]) / (i + 1 - lo) <= tau:
            return i
    return None


# ---------------------------------------------------------------------------
# multi-label study


def multilabel_seed_run(train_ex, test_ex, vocab, seed, budgets, with_tags=True,
                        ablations=True):
    """Full staged run for one training seed; returns reports, loss
    histories, and wall-clock timings per stage."""
    b = budgets
    images = np.stack([e.image for e in train_ex])
    concepts = np.stack([e.concepts for e in train_ex])
    tags = np.stack([e.tags for e in train_ex]) if train_ex[0].tags is not None else None
    out = {"seed": seed, "timings": {}}

    def timed(name, fn):
        t0 = time.monotonic()
        result = fn()
        out["timings"][name] = time.monotonic() - t0
        return result

    # stage 1a: unary on images alone
    unary_model, unary_curve = timed(
        "unary",
        lambda: pretrain_unary(images, concepts, b.unary_epochs, _rng(seed, 1),
                               batch_size=b.batch_size, lr=b.lr),
    )
    out["unary_curve"] = unary_curve

    # independent per-label baseline: same net, matched extra compute
    baseline = clone_unary(unary_model)
    timed("baseline", lambda: train_unary(baseline, images, concepts,
                                          b.baseline_extra_epochs, _rng(seed, 2),
                                          batch_size=b.batch_size, lr=b.lr))
    out["baseline_report"] = timed(
        "baseline_eval", lambda: evaluate_threshold(baseline, test_ex, vocab)
    )

    # stage 1b: decoder on ground-truth concept vectors
    init_proj, lstm_p, embed, dec_out, rnn_hist = timed(
        "rnn",
        lambda: pretrain_rnn(train_ex, vocab.size, vocab.start_id, _rng(seed, 3),
                             hidden=b.hidden, embed_dim=b.embed_dim, steps=b.rnn_steps,
                             batch_size=b.batch_size, lr=b.lr, peepholes=b.peepholes,
                             block_activation=b.block_activation),
    )
    out["rnn_history"] = rnn_hist

    # stage 2: joint finetuning of the main model
    model = SCRModel(clone_unary(unary_model), init_proj, lstm_p, embed, dec_out,
                     "semantic-prediction")
    out["joint_semantic"] = timed(
        "joint",
        lambda: train_joint(model, train_ex, b.joint_iters, vocab.start_id,
                            _rng(seed, 4), batch_size=b.batch_size, lr=b.joint_lr),
    )
    out["main_report"] = timed(
        "main_eval", lambda: evaluate_multilabel(model, test_ex, vocab, b.max_len)
    )

    if with_tags:
        # side-information arm: fused unary, same decoder pretraining
        unary_tag, _ = timed(
            "unary_tags",
            lambda: pretrain_unary(images, concepts, b.unary_epochs, _rng(seed, 5),
                                   tags=tags, batch_size=b.batch_size, lr=b.lr,
                                   side_pretrain_steps=b.side_steps),
        )
        proj_t, lstm_t, embed_t, out_t = build_decoder(
            len(vocab.labels), b.hidden, b.embed_dim, vocab.size, _rng(seed, 3),
            peepholes=b.peepholes, block_activation=b.block_activation)
        _clone_decoder(init_proj, lstm_p, embed, dec_out, proj_t, lstm_t, embed_t, out_t)
        tag_model = SCRModel(unary_tag, proj_t, lstm_t, embed_t, out_t,
                             "semantic-prediction")
        timed("joint_tags",
              lambda: train_joint(tag_model, train_ex, b.joint_iters, vocab.start_id,
                                  _rng(seed, 6), batch_size=b.batch_size, lr=b.joint_lr))
        out["tag_report"] = timed(
            "tag_eval", lambda: evaluate_multilabel(tag_model, test_ex, vocab, b.max_len)
        )

    if ablations:
        for variant, key, stage in (
            ("feature-unsupervised", "joint_feature_plain", 7),
            ("feature-deeply-supervised", "joint_feature_deep", 8),
        ):
            ab_model = _feature_variant_model(unary_model, vocab, b, seed, variant)
            out[key] = timed(
                key,
                lambda m=ab_model: train_joint(m, train_ex, b.joint_iters, vocab.start_id,
                                               _rng(seed, 9), batch_size=b.batch_size,
                                               lr=b.joint_lr),
            )
            out[key + "_report"] = evaluate_multilabel(ab_model, test_ex, vocab, b.max_len)
    return out


def _clone_decoder(src_proj, src_lstm, src_embed, src_out, dst_proj, dst_lstm,
                   dst_embed, dst_out):
    src = decoder_named_params(src_proj, src_lstm, src_embed, src_out)
    dst = decoder_named_params(dst_proj, dst_lstm, dst_embed, dst_out)
    for (_, s), (_, d) in zip(src, dst):
        d.data[...] = s.data


def _feature_variant_model(unary_model, vocab, budgets, seed, variant):
    """Ablation model: shared pretrained unary, fresh decoder on the
    feature interface (no decoder pretraining exists for it)."""
    unary_copy = clone_unary(unary_model)
    parts = build_decoder(unary_copy.predictor.feature_width, budgets.hidden,
                          budgets.embed_dim, vocab.size, _rng(seed, 10),
                          peepholes=budgets.peepholes,
                          block_activation=budgets.block_activation)
    return SCRModel(unary_copy, *parts, variant)


def run_multilabel_study(seeds=(0, 1, 2, 3, 4), dataset_seed=2026, n_samples=2500,
                         correlation=0.8, tag_noise=0.3, tag_drop=0.3, grid=32,
                         budgets=None, with_tags=True, ablations=True):
    """Generate one dataset and run the staged protocol for every seed."""
    budgets = budgets or Budgets()
    spec = DatasetSpec(n_samples=n_samples, seed=dataset_seed, grid=grid,
                       correlation=correlation, tag_noise=tag_noise, tag_drop=tag_drop)
    train, test, vocab = gen_dataset(spec)
    train_ex = prepare_examples(train, vocab, with_tags=True)
    test_ex = prepare_examples(test, vocab, with_tags=True)
    runs = [
        multilabel_seed_run(train_ex, test_ex, vocab, seed, budgets,
                            with_tags=with_tags, ablations=ablations)
        for seed in seeds
    ]
    return {"spec": spec, "vocab": vocab, "budgets": budgets, "runs": runs,
            "n_train": len(train), "n_test": len(test)}


def convergence_table(runs, tau, window=25):
    """Iterations-to-threshold rows per seed and variant (None = never)."""
    rows = []
    for run in runs:
        row = {"seed": run["seed"]}
        for key, name in (
            ("joint_semantic", "semantic-prediction"),
            ("joint_feature_deep", "feature-deeply-supervised"),
            ("joint_feature_plain", "feature-unsupervised"),
        ):
            if key in run:
                row[name] = iterations_to_threshold(run[key], tau, window)
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# captioning study


def caption_seed_run(seed, dataset_seed=4096, n_samples=625, grid=32, top_k=10,
                     budgets=None):
    """Train the captioning pipeline and score greedy captions with BLEU."""
    b = budgets or replace(Budgets(), max_len=10)
    spec = DatasetSpec(n_samples=n_samples, seed=dataset_seed, grid=grid,
                       correlation=0.0, tag_noise=0.0, tag_drop=0.0,
                       two_object_rate=0.8)
    train, test, _ = gen_dataset(spec)
    cvocab, coverage = concept_vocab_from_captions(train, top_k)
    wvocab = caption_word_vocab(train)
    train_ex = prepare_examples(train, cvocab, task="caption", word_vocab=wvocab)

    images = np.stack([e.image for e in train_ex])
    concepts = np.stack([e.concepts for e in train_ex])
    unary_model, _ = pretrain_unary(images, concepts, b.unary_epochs, _rng(seed, 1),
                                    batch_size=b.batch_size, lr=b.lr)
    init_proj, lstm_p, embed, dec_out, _ = pretrain_rnn(
        train_ex, wvocab.size, wvocab.start_id, _rng(seed, 3), hidden=b.hidden,
        embed_dim=b.embed_dim, steps=b.rnn_steps, batch_size=b.batch_size, lr=b.lr,
        peepholes=b.peepholes, block_activation=b.block_activation)
    model = SCRModel(unary_model, init_proj, lstm_p, embed, dec_out,
                     "semantic-prediction")
    train_joint(model, train_ex, b.joint_iters, wvocab.start_id, _rng(seed, 4),
                batch_size=b.batch_size, lr=b.joint_lr)

    # captions for the held-out scenes: greedy, no duplicate masking
    test_images = np.stack([s.image for s in test])
    emb, _ = interface_embedding(model, Tensor(test_images))
    seqs = greedy_decode_batch(model, emb.data, b.max_len, mask_emitted=False)
    ended = [len(s) <= b.max_len and s[-1] == wvocab.end_id for s in seqs]
    captions = [[wvocab.label_of(t) for t in s if t != wvocab.end_id] for s in seqs]
    references = [[s.caption] for s in test]
    bleus = {n: corpus_bleu(captions, references, n) for n in (1, 2, 3, 4)}
    exact = sum(c == r[0] for c, r in zip(captions, references)) / len(test)
    return {
        "seed": seed, "model": model, "word_vocab": wvocab, "concept_vocab": cvocab,
        "coverage": coverage, "bleu": bleus, "all_ended": all(ended),
        "ended_fraction": sum(ended) / len(ended), "exact_match": exact,
        "captions": captions, "references": references,
    }


# ---------------------------------------------------------------------------
# gradient-check suite


def _projected(op_output, weights):
    return reduce_sum(mul(op_output, Tensor(weights)))


def gradcheck_cases(rng):
    """(name, loss_fn, params) probes covering every differentiable op."""
    from .autodiff import (
        Parameter, add, concat, conv2d, embed_lookup, matmul, maxpool2, narrow,
        relu, reshape, sigmoid, softmax, tanh,
    )
    from .nn import DenseLayer, EmbeddingMatrix

    cases = []

    def case(name, build):
        cases.append((name, *build()))

    def par(*shape):
        return Parameter(rng.standard_normal(shape), "p")

    def w(*shape):
        return rng.standard_normal(shape)

    def simple(name, op, *shapes):
        ps = [par(*s) for s in shapes]
        out_shape = op(*ps).shape
        weights = w(*out_shape)
        case(name, lambda: (lambda: _projected(op(*ps), weights), ps))

    simple("matmul", lambda a, b: matmul(a, b), (3, 4), (4, 2))
    simple("matmul_vec", lambda a, b: matmul(a, b), (3, 4), (4,))
    simple("matmul_tb", lambda a, b: matmul(a, b, transpose_b=True), (5, 4), (3, 4))
    simple("add_broadcast", add, (3, 4), (4,))
    simple("mul", mul, (5,), (5,))
    simple("sigmoid", sigmoid, (6,))
    simple("tanh", tanh, (6,))
    simple("relu", relu, (6,))
    simple("softmax", softmax, (2, 5))
    simple("concat", lambda a, b: concat([a, b], axis=0), (3, 2), (4, 2))
    simple("slice", lambda a: narrow(a, 0, 2, 3), (7, 2))
    simple("reshape", lambda a: reshape(a, (2, 6)), (3, 4))
    simple("conv2d", conv2d, (2, 2, 6, 6), (3, 2, 3, 3))
    simple("maxpool2", maxpool2, (1, 2, 6, 6))

    ps = [par(3)]
    case("sum", lambda: (lambda: reduce_sum(mul(ps[0], ps[0])), ps))
    pm = [par(4)]
    case("mean", lambda: (lambda: reduce_mean(mul(pm[0], pm[0])), pm))

    E = Parameter(rng.standard_normal((4, 6)), "E")
    ids = np.array([1, 5, 1])
    weights = w(3, 4)
    case("embed", lambda: (lambda: _projected(embed_lookup(E, ids), weights), [E]))

    pce = Parameter(rng.standard_normal(7), "logits")
    targets = (rng.random(7) < 0.5).astype(float)
    case("sigmoid_ce", lambda: (lambda: sigmoid_ce_loss(targets, sigmoid(pce)), [pce]))

    pnl = Parameter(rng.standard_normal((3, 5)), "logits")
    tseq = rng.integers(0, 5, size=3)
    case("softmax_nll", lambda: (lambda: softmax_nll_sequence(pnl, tseq), [pnl]))

    dense = DenseLayer(4, 3, rng)
    xd = w(2, 4)
    wd = w(2, 3)
    case("dense", lambda: (lambda: _projected(dense(Tensor(xd)), wd), dense.params()))

    for peep in (False, True):
        lp = LSTMParams(3, 2, rng, peepholes=peep)
        x = w(2)
        prev = LSTMState(w(3) * 0.5, w(3) * 0.5)
        wh, wc = w(3), w(3)

        def lstm_loss(lp=lp, x=x, prev=prev, wh=wh, wc=wc):
            st = lstm_cell(Tensor(x), prev, lp)
            return add(_projected(st.h, wh), _projected(st.c, wc))

        case(f"lstm_cell_peep{int(peep)}", lambda lp=lp, f=lstm_loss: (f, lp.params()))

    emb_layer = EmbeddingMatrix(3, 5, rng)
    we = w(2, 3)
    case("embedding_layer", lambda: (
        lambda: _projected(emb_layer.lookup(np.array([0, 4])), we), emb_layer.params()))

    return cases


def tiny_joint_case(rng, variant="semantic-prediction", use_tags=False):
    """A complete model small enough to finite-difference end to end."""
    from .seqmodel import Example

    config = {
        "unary": {"grid": 12, "n_concepts": 3, "channels": [2, 3],
                  "tag_width": 6 if use_tags else None},
        "variant": variant,
        "hidden": 4,
        "embed_dim": 3,
        "vocab_size": 5,
        "peepholes": False,
        "block_activation": "tanh",
    }
    model = build_scr(config, rng)
    # generic position: the default near-zero init leaves recurrent-weight
    # gradients at roundoff scale, which central differences cannot resolve
    for p in model.params():
        p.data[...] = rng.uniform(-0.4, 0.4, p.data.shape)
    examples = []
    for target in ([2, 0, 4], [1, 4]):
        examples.append(Example(
            image=rng.random((3, 12, 12)),
            concepts=(rng.random(3) < 0.5).astype(float),
            tags=(rng.random(6) < 0.5).astype(float) if use_tags else None,
            target=target,
        ))
    return model, examples


def gradcheck_suite(n_seeds=10, eps=1e-5, joint_eps=1e-4, variant_seeds=2):
    """Max relative gradient error per probe over `n_seeds` random draws.

    Per-op probes run at `eps`; the end-to-end joint-loss probes use the
    larger `joint_eps` because their loss magnitude makes 1e-5 central
    differences roundoff-bound for the weakest gradient paths. The
    non-default interface variants are spot-checked on `variant_seeds`
    seeds; the main model runs on all of them.
    """
    worst = {}
    for seed in range(n_seeds):
        rng = np.random.default_rng([seed, 99])
        for name, loss_fn, params in gradcheck_cases(rng):
            err = grad_check(loss_fn, params, eps)
            worst[name] = max(worst.get(name, 0.0), err)
        variants = [("semantic-prediction", False)]
        if seed < variant_seeds:
            variants += [("semantic-prediction", True),
                         ("feature-deeply-supervised", False),
                         ("feature-unsupervised", False)]
        for variant, tags in variants:
            model, examples = tiny_joint_case(rng, variant, tags)
            loss_fn = lambda m=model, e=examples: joint_loss_graph(m, e, 3)[0]
            name = f"joint_{variant}{'_tags' if tags else ''}"
            worst[name] = max(worst.get(name, 0.0),
                              grad_check(loss_fn, model.params(), joint_eps))
    return worst
