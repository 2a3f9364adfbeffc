"""Model construction and versioned JSON checkpoints.

A checkpoint stores a format version, the configuration needed to
rebuild the model architecture, and every named parameter tensor as
(shape, flat float64 values). Serialisation is canonical (sorted keys,
fixed separators, shortest round-trip float repr), so save -> load ->
save is byte-identical and seeded runs can be compared by file hash.
"""

import json

import numpy as np

from .lstm import LSTMParams
from .nn import DenseLayer, EmbeddingMatrix
from .seqmodel import SCRModel, VARIANTS
from .unary import ConceptPredictor, SideInfoMLP, UnaryModel

FORMAT_VERSION = 1


def unary_config(model):
    p = model.predictor
    return {
        "grid": p.grid,
        "n_concepts": p.n_concepts,
        "channels": list(p.channels),
        "tag_width": model.side.n_tags if model.side is not None else None,
    }


def build_unary(config, rng):
    predictor = ConceptPredictor(
        config["grid"], config["n_concepts"], rng, channels=tuple(config["channels"])
    )
    side = None
    if config.get("tag_width") is not None:
        side = SideInfoMLP(config["tag_width"], config["n_concepts"], rng)
    return UnaryModel(predictor, side)


def scr_config(model):
    return {
        "unary": unary_config(model.unary),
        "variant": model.variant,
        "hidden": model.lstm.hidden_size,
        "embed_dim": model.lstm.input_size,
        "vocab_size": model.embed.vocab_size,
        "peepholes": model.lstm.peepholes,
        "block_activation": model.lstm.block_activation,
    }


def build_decoder(interface_width, hidden, embed_dim, vocab_size, rng,
                  peepholes=False, block_activation="tanh"):
    init_proj = DenseLayer(interface_width, hidden, rng, "init_proj")
    lstm = LSTMParams(hidden, embed_dim, rng, peepholes=peepholes,
                      block_activation=block_activation, name="lstm")
    embed = EmbeddingMatrix(embed_dim, vocab_size, rng, "embed")
    out = DenseLayer(hidden, vocab_size, rng, "out")
    return init_proj, lstm, embed, out


def build_scr(config, rng):
    if config["variant"] not in VARIANTS:
        raise ValueError(f"unknown interface variant {config['variant']!r}")
    unary = build_unary(config["unary"], rng)
    width = (
        unary.predictor.n_concepts
        if config["variant"] == "semantic-prediction"
        else unary.predictor.feature_width
    )
    init_proj, lstm, embed, out = build_decoder(
        width, config["hidden"], config["embed_dim"], config["vocab_size"], rng,
        peepholes=config.get("peepholes", False),
        block_activation=config.get("block_activation", "tanh"),
    )
    return SCRModel(unary, init_proj, lstm, embed, out, config["variant"])


def unary_named_params(model):
    return [(p.name, p) for p in model.params()]


def save_checkpoint(path, kind, config, named_params):
    params = {}
    for name, p in named_params:
        if name in params:
            raise ValueError(f"duplicate parameter name {name!r}")
        params[name] = {"shape": list(p.data.shape), "values": p.data.reshape(-1).tolist()}
    doc = {"format_version": FORMAT_VERSION, "kind": kind, "config": config, "params": params}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"{path}: unsupported checkpoint format {doc.get('format_version')!r}"
        )
    for key in ("kind", "config", "params"):
        if key not in doc:
            raise ValueError(f"{path}: checkpoint missing field {key!r}")
    return doc


def _restore(named_params, stored, path="checkpoint"):
    names = [name for name, _ in named_params]
    missing = set(names) - set(stored)
    extra = set(stored) - set(names)
    if missing or extra:
        raise ValueError(
            f"{path}: parameter names do not cover the model "
            f"(missing {sorted(missing)}, unexpected {sorted(extra)})"
        )
    for name, p in named_params:
        entry = stored[name]
        values = np.asarray(entry["values"], dtype=np.float64)
        if list(p.data.shape) != list(entry["shape"]) or values.size != p.data.size:
            raise ValueError(
                f"{path}: shape mismatch for {name!r}: "
                f"stored {entry['shape']}, model {list(p.data.shape)}"
            )
        p.data[...] = values.reshape(p.data.shape)


def load_unary(path):
    doc = load_checkpoint(path)
    if doc["kind"] != "unary":
        raise ValueError(f"{path}: expected a unary checkpoint, found {doc['kind']!r}")
    model = build_unary(doc["config"], np.random.default_rng(0))
    _restore(unary_named_params(model), doc["params"], path)
    return model, doc["config"]


def load_scr(path):
    doc = load_checkpoint(path)
    if doc["kind"] != "scr":
        raise ValueError(f"{path}: expected a model checkpoint, found {doc['kind']!r}")
    model = build_scr(doc["config"], np.random.default_rng(0))
    _restore(model.named_params(), doc["params"], path)
    return model, doc["config"]


def save_unary(path, model):
    save_checkpoint(path, "unary", unary_config(model), unary_named_params(model))


def save_scr(path, model):
    save_checkpoint(path, "scr", scr_config(model), model.named_params())


def clone_unary(model):
    """Independent copy (fresh parameters with equal values)."""
    copy = build_unary(unary_config(model), np.random.default_rng(0))
    for (_, src), (_, dst) in zip(unary_named_params(model), unary_named_params(copy)):
        dst.data[...] = src.data
    return copy


def decoder_named_params(init_proj, lstm, embed, out):
    ps = init_proj.params() + lstm.all_params() + embed.params() + out.params()
    return [(p.name, p) for p in ps]


def save_decoder(path, init_proj, lstm, embed, out):
    config = {
        "interface_width": init_proj.n_in,
        "hidden": lstm.hidden_size,
        "embed_dim": lstm.input_size,
        "vocab_size": embed.vocab_size,
        "peepholes": lstm.peepholes,
        "block_activation": lstm.block_activation,
    }
    save_checkpoint(path, "decoder", config, decoder_named_params(init_proj, lstm, embed, out))


def load_decoder(path):
    doc = load_checkpoint(path)
    if doc["kind"] != "decoder":
        raise ValueError(f"{path}: expected a decoder checkpoint, found {doc['kind']!r}")
    cfg = doc["config"]
    parts = build_decoder(
        cfg["interface_width"], cfg["hidden"], cfg["embed_dim"], cfg["vocab_size"],
        np.random.default_rng(0), peepholes=cfg.get("peepholes", False),
        block_activation=cfg.get("block_activation", "tanh"),
    )
    _restore(decoder_named_params(*parts), doc["params"], path)
    return parts, cfg
