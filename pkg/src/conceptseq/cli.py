"""Command-line driver: data generation, staged training, evaluation,
inference, gradient checking, and the variant ablation study.

Every command reads a flat ``key = value`` config file (optional) with
command-line overrides, requires an explicit seed, and writes its
artifacts (checkpoints, loss CSVs, metric reports, resolved config) into
a run directory, so a pipeline is reproducible from the files alone.
"""

import argparse
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import decode, experiments, modelio, seqmodel, synthdata
from .experiments import Budgets
from .labelseq import sequence_to_set
from .metrics import corpus_bleu

VARIANT_ALIASES = {
    "semantic": "semantic-prediction",
    "feature-deep": "feature-deeply-supervised",
    "feature-plain": "feature-unsupervised",
}


def canonical_variant(name):
    full = VARIANT_ALIASES.get(name, name)
    if full not in seqmodel.VARIANTS:
        raise ValueError(f"unknown variant {name!r}")
    return full


@dataclass
class RunConfig:
    task: str = "multilabel"
    variant: str = "semantic-prediction"
    seed: int = -1
    # dataset
    n_samples: int = 2500
    grid: int = 32
    correlation: float = 0.8
    tag_noise: float = 0.3
    tag_drop: float = 0.3
    two_object_rate: float = 0.75
    train_fraction: float = 0.8
    caption_concepts: int = 10
    # model
    hidden: int = 64
    embed_dim: int = 32
    peepholes: bool = False
    block_activation: str = "tanh"
    use_tags: bool = False
    order: str = "rare-first"
    # optimiser and stage budgets
    batch_size: int = 32
    lr: float = 1e-3
    joint_lr: float = 3e-4
    unary_epochs: int = 15
    baseline_extra_epochs: int = 10
    side_steps: int = 400
    rnn_steps: int = 1200
    joint_iters: int = 600
    # inference / ablation
    beam_width: int = 3
    max_len: int = 12
    ablation_tau: float = 2.0
    ablation_seeds: int = 5

    def budgets(self):
        return Budgets(
            unary_epochs=self.unary_epochs,
            baseline_extra_epochs=self.baseline_extra_epochs,
            side_steps=self.side_steps, rnn_steps=self.rnn_steps,
            joint_iters=self.joint_iters, batch_size=self.batch_size,
            lr=self.lr, joint_lr=self.joint_lr, hidden=self.hidden,
            embed_dim=self.embed_dim, max_len=self.max_len,
            peepholes=self.peepholes, block_activation=self.block_activation,
        )


def _coerce(field_type, raw, key):
    if field_type is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"config {key}: expected a boolean, got {raw!r}")
    return field_type(raw)


def parse_config_file(path):
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = raw
    return values


def build_config(args):
    cfg = RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    raw = {}
    if getattr(args, "config", None):
        raw.update(parse_config_file(args.config))
    for item in getattr(args, "overrides", None) or []:
        if "=" not in item:
            _fail(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        raw[key.strip()] = val.strip()
    for key, val in raw.items():
        if key not in types:
            _fail(f"unknown config key {key!r}")
        try:
            setattr(cfg, key, _coerce(types[key], val, key))
        except ValueError as exc:
            _fail(str(exc))
    for flag in ("task", "seed", "beam_width", "max_len"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, flag, value)
    if getattr(args, "variant", None) is not None:
        cfg.variant = args.variant
    try:
        cfg.variant = canonical_variant(cfg.variant)
    except ValueError as exc:
        _fail(str(exc))
    if cfg.task not in ("multilabel", "caption"):
        _fail(f"unknown task {cfg.task!r}")
    if cfg.seed < 0:
        _fail("a non-negative --seed is required")
    return cfg


def _fail(message):
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(1)


def _ensure_dir(path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def write_loss_csv(path, rows):
    """Rows of (iteration, L_u, L_r, L)."""
    with open(path, "w") as fh:
        fh.write("iteration,L_u,L_r,L\n")
        for it, l_u, l_r, total in rows:
            fh.write(f"{it},{l_u!r},{l_r!r},{total!r}\n")


def write_resolved_config(cfg, out_dir):
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig)]
    (Path(out_dir) / "config.txt").write_text("\n".join(lines) + "\n")


def _require(path, what):
    if path is None:
        _fail(f"{what} is required for this command")
    if not Path(path).exists():
        _fail(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------------------
# dataset plumbing


def load_data_dir(data_dir):
    data_dir = Path(data_dir)
    meta_path = data_dir / "meta.json"
    if not meta_path.exists():
        _fail(f"{data_dir} is not a dataset directory (meta.json missing)")
    meta = json.loads(meta_path.read_text())
    grid = meta["grid"]
    train = synthdata.load_dataset(data_dir / "train.jsonl", grid)
    test = synthdata.load_dataset(data_dir / "test.jsonl", grid)
    concepts = synthdata.load_vocab(data_dir / "concepts.json")
    words = None
    if (data_dir / "words.json").exists():
        words = synthdata.load_vocab(data_dir / "words.json")
    return meta, train, test, concepts, words


def _examples(cfg, train, test, concepts, words):
    kwargs = dict(task=cfg.task, word_vocab=words, order=cfg.order, with_tags=True)
    return (
        seqmodel.prepare_examples(train, concepts, **kwargs),
        seqmodel.prepare_examples(test, concepts, **kwargs),
    )


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    cfg = build_config(args)
    out = _ensure_dir(args.out_dir)
    spec = synthdata.DatasetSpec(
        n_samples=cfg.n_samples, seed=cfg.seed, grid=cfg.grid,
        correlation=cfg.correlation, tag_noise=cfg.tag_noise,
        tag_drop=cfg.tag_drop, two_object_rate=cfg.two_object_rate,
        train_fraction=cfg.train_fraction,
    )
    train, test, scene_vocab = synthdata.gen_dataset(spec)
    synthdata.save_dataset(train, out / "train.jsonl")
    synthdata.save_dataset(test, out / "test.jsonl")
    if cfg.task == "caption":
        concepts, coverage = synthdata.concept_vocab_from_captions(train, cfg.caption_concepts)
        synthdata.save_vocab(concepts, out / "concepts.json")
        synthdata.save_vocab(synthdata.caption_word_vocab(train), out / "words.json")
    else:
        concepts, coverage = scene_vocab, 1.0
        synthdata.save_vocab(concepts, out / "concepts.json")
    write_json(out / "tags.json", {"tags": list(synthdata.TAG_VOCAB)})
    write_json(out / "meta.json", {
        "task": cfg.task,
        "grid": cfg.grid,
        "n_train": len(train),
        "n_test": len(test),
        "concept_coverage": coverage,
        "spec": {
            "n_samples": spec.n_samples, "seed": spec.seed, "grid": spec.grid,
            "correlation": spec.correlation, "tag_noise": spec.tag_noise,
            "tag_drop": spec.tag_drop, "two_object_rate": spec.two_object_rate,
            "train_fraction": spec.train_fraction,
        },
    })
    write_resolved_config(cfg, out)
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")
    return 0


def cmd_train_unary(args):
    cfg = build_config(args)
    data_dir = _require(args.data, "--data")
    out = _ensure_dir(args.out_dir)
    _, train, _, concepts, words = load_data_dir(data_dir)
    train_ex, _ = _examples(cfg, train, [], concepts, words)
    images = np.stack([e.image for e in train_ex])
    targets = np.stack([e.concepts for e in train_ex])
    tags = np.stack([e.tags for e in train_ex]) if cfg.use_tags else None
    rng = np.random.default_rng([cfg.seed, 1])
    model, curve = experiments.pretrain_unary(
        images, targets, cfg.unary_epochs, rng, tags=tags,
        batch_size=cfg.batch_size, lr=cfg.lr, side_pretrain_steps=cfg.side_steps,
    )
    modelio.save_unary(out / "unary.json", model)
    write_loss_csv(out / "unary_loss.csv",
                   [(i, loss, 0.0, loss) for i, loss in enumerate(curve)])
    write_resolved_config(cfg, out)
    print(f"unary model: final epoch loss {curve[-1]:.4f} -> {out / 'unary.json'}")
    return 0


def cmd_train_rnn(args):
    cfg = build_config(args)
    data_dir = _require(args.data, "--data")
    out = _ensure_dir(args.out_dir)
    _, train, _, concepts, words = load_data_dir(data_dir)
    vocab = words if cfg.task == "caption" else concepts
    train_ex, _ = _examples(cfg, train, [], concepts, words)
    rng = np.random.default_rng([cfg.seed, 3])
    init_proj, lstm_p, embed, dec_out, history = seqmodel.pretrain_rnn(
        train_ex, vocab.size, vocab.start_id, rng, hidden=cfg.hidden,
        embed_dim=cfg.embed_dim, steps=cfg.rnn_steps, batch_size=cfg.batch_size,
        lr=cfg.lr, peepholes=cfg.peepholes, block_activation=cfg.block_activation,
    )
    modelio.save_decoder(out / "decoder.json", init_proj, lstm_p, embed, dec_out)
    write_loss_csv(out / "rnn_loss.csv",
                   [(i, 0.0, loss, loss) for i, loss in enumerate(history)])
    write_resolved_config(cfg, out)
    print(f"decoder: final step loss {history[-1]:.4f} -> {out / 'decoder.json'}")
    return 0


def cmd_train_joint(args):
    cfg = build_config(args)
    data_dir = _require(args.data, "--data")
    out = _ensure_dir(args.out_dir)
    unary_path = _require(args.unary, "--unary (stage-one checkpoint)")
    _, train, _, concepts, words = load_data_dir(data_dir)
    vocab = words if cfg.task == "caption" else concepts
    train_ex, _ = _examples(cfg, train, [], concepts, words)

    try:
        unary_model, _ = modelio.load_unary(unary_path)
    except ValueError as exc:
        _fail(str(exc))

    if cfg.variant == "semantic-prediction":
        decoder_path = args.decoder
        if decoder_path is None:
            _fail("train-joint with the semantic-prediction variant needs the "
                  "pretrained decoder (--decoder, from train-rnn)")
        _require(decoder_path, "--decoder")
        try:
            (init_proj, lstm_p, embed, dec_out), dcfg = modelio.load_decoder(decoder_path)
        except ValueError as exc:
            _fail(str(exc))
        if dcfg["interface_width"] != unary_model.predictor.n_concepts:
            _fail("decoder interface width does not match the unary concept count")
    else:
        rng0 = np.random.default_rng([cfg.seed, 10])
        init_proj, lstm_p, embed, dec_out = modelio.build_decoder(
            unary_model.predictor.feature_width, cfg.hidden, cfg.embed_dim,
            vocab.size, rng0, peepholes=cfg.peepholes,
            block_activation=cfg.block_activation,
        )
    model = seqmodel.SCRModel(unary_model, init_proj, lstm_p, embed, dec_out, cfg.variant)
    rng = np.random.default_rng([cfg.seed, 4])
    history = seqmodel.train_joint(
        model, train_ex, cfg.joint_iters, vocab.start_id, rng,
        batch_size=cfg.batch_size, lr=cfg.joint_lr,
    )
    modelio.save_scr(out / "model.json", model)
    write_loss_csv(out / "loss.csv", history)
    write_resolved_config(cfg, out)
    print(f"joint model: final L {history[-1][3]:.4f} -> {out / 'model.json'}")
    return 0


def _load_scr_or_fail(path):
    try:
        return modelio.load_scr(path)
    except ValueError as exc:
        _fail(str(exc))


def cmd_eval_multilabel(args):
    cfg = build_config(args)
    data_dir = _require(args.data, "--data")
    out = _ensure_dir(args.out_dir)
    _, train, test, concepts, words = load_data_dir(data_dir)
    _, test_ex = _examples(cfg, [], test, concepts, words)
    if args.threshold_unary:
        model, _ = modelio.load_unary(_require(args.unary, "--unary"))
        report = experiments.evaluate_threshold(model, test_ex, concepts)
        name = "threshold"
    else:
        model, _ = _load_scr_or_fail(_require(args.model, "--model"))
        report = experiments.evaluate_multilabel(model, test_ex, concepts, cfg.max_len)
        name = model.variant
    payload = {"mode": name, "n_test": len(test_ex), **report.as_dict()}
    write_json(out / "metrics.json", payload)
    print(json.dumps(payload, sort_keys=True, indent=1))
    return 0


def cmd_eval_caption(args):
    cfg = build_config(args)
    data_dir = _require(args.data, "--data")
    out = _ensure_dir(args.out_dir)
    _, train, test, concepts, words = load_data_dir(data_dir)
    if words is None:
        _fail("eval-caption needs a caption dataset (words.json missing)")
    model, _ = _load_scr_or_fail(_require(args.model, "--model"))
    images = np.stack([s.image for s in test])
    from .autodiff import Tensor

    emb, _ = seqmodel.interface_embedding(model, Tensor(images))
    if cfg.beam_width > 1:
        seqs = []
        for row in emb.data:
            tokens, _ = decode.beam_search(model, row, cfg.beam_width, cfg.max_len)
            seqs.append(tokens)
    else:
        seqs = decode.greedy_decode_batch(model, emb.data, cfg.max_len, mask_emitted=False)
    ended = [len(s) <= cfg.max_len and s and s[-1] == words.end_id for s in seqs]
    captions = [[words.label_of(t) for t in s if t != words.end_id] for s in seqs]
    references = [[s.caption] for s in test]
    payload = {
        "n_test": len(test),
        "beam_width": cfg.beam_width,
        "ended_fraction": sum(ended) / len(ended),
        "exact_match": sum(c == r[0] for c, r in zip(captions, references)) / len(test),
    }
    for n in (1, 2, 3, 4):
        payload[f"BLEU-{n}"] = corpus_bleu(captions, references, n)
    write_json(out / "caption_metrics.json", payload)
    print(json.dumps(payload, sort_keys=True, indent=1))
    return 0


def cmd_infer(args):
    cfg = build_config(args)
    data_dir = _require(args.data, "--data")
    meta, train, test, concepts, words = load_data_dir(data_dir)
    model, _ = _load_scr_or_fail(_require(args.model, "--model"))
    samples = test if args.split == "test" else train
    if args.limit:
        samples = samples[: args.limit]
    vocab = words if cfg.task == "caption" else concepts
    from .autodiff import Tensor

    images = np.stack([s.image for s in samples])
    tags = None
    if model.unary.side is not None:
        tags = Tensor(np.stack([synthdata.tag_vector(s) for s in samples]))
    emb, _ = seqmodel.interface_embedding(model, Tensor(images), tags)
    for sample, row in zip(samples, emb.data):
        if cfg.task == "caption":
            tokens, logp = decode.beam_search(model, row, cfg.beam_width, cfg.max_len)
        else:
            tokens = decode.greedy_decode(model, row, cfg.max_len)
            logp = decode.replay_logprob(model, row, tokens)
        if cfg.task == "caption":
            prediction = [vocab.label_of(t) for t in tokens if t != vocab.end_id]
        else:
            prediction = sorted(sequence_to_set(tokens, vocab))
        print(json.dumps({"id": sample.id, "prediction": prediction, "logprob": logp},
                         sort_keys=True))
    return 0


def cmd_grad_check(args):
    errors = experiments.gradcheck_suite(n_seeds=args.seeds)
    worst = max(errors.values())
    for name in sorted(errors):
        status = "ok" if errors[name] < 1e-4 else "FAIL"
        print(f"{name:40s} {errors[name]:.3e}  {status}")
    print(f"worst relative error: {worst:.3e}")
    return 0 if worst < 1e-4 else 1


def cmd_ablation(args):
    cfg = build_config(args)
    out = _ensure_dir(args.out_dir)
    study = experiments.run_multilabel_study(
        seeds=tuple(range(cfg.ablation_seeds)),
        dataset_seed=cfg.seed, n_samples=cfg.n_samples, correlation=cfg.correlation,
        tag_noise=cfg.tag_noise, tag_drop=cfg.tag_drop, grid=cfg.grid,
        budgets=cfg.budgets(),
    )
    table = experiments.convergence_table(study["runs"], cfg.ablation_tau)
    rows = []
    for run, conv in zip(study["runs"], table):
        rows.append({
            "seed": run["seed"],
            "baseline_C-F1": run["baseline_report"].c_f1,
            "semantic_C-F1": run["main_report"].c_f1,
            "baseline_O-F1": run["baseline_report"].o_f1,
            "semantic_O-F1": run["main_report"].o_f1,
            "tags_O-F1": run["tag_report"].o_f1 if "tag_report" in run else None,
            "iters_to_tau": conv,
        })
    payload = {"tau": cfg.ablation_tau, "n_train": study["n_train"],
               "n_test": study["n_test"], "rows": rows}
    write_json(out / "ablation.json", payload)
    write_resolved_config(cfg, out)
    header = f"{'seed':>4} {'base C-F1':>10} {'semantic C-F1':>14} {'iters sem':>10} {'iters deep':>10} {'iters plain':>11}"
    print(header)
    for row in rows:
        conv = row["iters_to_tau"]
        fmt = lambda v: "never" if v is None else str(v)
        print(f"{row['seed']:>4} {row['baseline_C-F1']:>10.4f} {row['semantic_C-F1']:>14.4f} "
              f"{fmt(conv.get('semantic-prediction')):>10} "
              f"{fmt(conv.get('feature-deeply-supervised')):>10} "
              f"{fmt(conv.get('feature-unsupervised')):>11}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p, out_dir=True):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="run seed (required unless set in config)")
    p.add_argument("--task", choices=("multilabel", "caption"))
    p.add_argument("--variant", choices=tuple(VARIANT_ALIASES) + seqmodel.VARIANTS)
    p.add_argument("--beam-width", dest="beam_width", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                   help="override any config key")
    if out_dir:
        p.add_argument("--out-dir", required=True)


def make_parser():
    parser = argparse.ArgumentParser(
        prog="conceptseq",
        description="Concept-grounded CNN-LSTM annotation on synthetic scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-unary", help="stage 1a: pretrain the concept predictor")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_train_unary)

    p = sub.add_parser("train-rnn", help="stage 1b: pretrain the decoder on true concepts")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_train_rnn)

    p = sub.add_parser("train-joint", help="stage 2: finetune the full model jointly")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--unary", help="unary checkpoint from train-unary")
    p.add_argument("--decoder", help="decoder checkpoint from train-rnn")
    p.set_defaults(func=cmd_train_joint)

    p = sub.add_parser("eval-multilabel", help="precision/recall/F1 on the test split")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", help="joint model checkpoint")
    p.add_argument("--unary", help="unary checkpoint (with --threshold-unary)")
    p.add_argument("--threshold-unary", action="store_true",
                   help="evaluate the per-label sigmoid baseline instead")
    p.set_defaults(func=cmd_eval_multilabel)

    p = sub.add_parser("eval-caption", help="BLEU of decoded captions on the test split")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_eval_caption)

    p = sub.add_parser("infer", help="decode predictions for dataset samples")
    _add_common(p, out_dir=False)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--limit", type=int, default=10)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("grad-check", help="finite-difference check of every op")
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablation", help="interface-variant comparison study")
    _add_common(p)
    p.set_defaults(func=cmd_ablation)

    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
