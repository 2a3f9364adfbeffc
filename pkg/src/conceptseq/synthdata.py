"""Deterministic generator of toy annotated scenes.

Each scene is a G x G x 3 image containing one or two coloured shapes on
a noisy background. A sample carries:

  * a binary concept vector over 12 concepts: 4 shapes, 4 colours, and
    4 arrangement concepts (solo, pair, twins = same shapes,
    tones = same colours);
  * noisy side-information tags: the true concept names with dropout,
    plus random false tags from a 30-word tag vocabulary;
  * a caption from the closed grammar
    "a <colour> <shape> [above|beside] a <colour> <shape>".

Captions list objects in a canonical order (by shape then colour), and
the scene is laid out to match the sampled relation word, so every
caption is truthful and is uniquely recoverable from its bag of words.
Shape "bar" is rare (p = 0.05) to make rare-first orderings meaningful,
and a correlation knob rho biases each shape towards a designated colour
(at rho = 1 every square is red, every circle green, and so on).

Every sample is a pure function of (dataset seed, sample index), so
generation is reproducible and can be sharded. Pixel values are
quantised to float32 at generation time: the dataset file format stores
float32, and quantising up front makes the in-memory and
written-then-reloaded pipelines bit-identical.
"""

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .labelseq import LabelVocabulary

SHAPES = ("square", "circle", "triangle", "bar")
COLOURS = ("red", "green", "blue", "yellow")
DERIVED = ("solo", "pair", "twins", "tones")
CONCEPTS = SHAPES + COLOURS + DERIVED

RARE_SHAPE = "bar"
RARE_SHAPE_PROB = 0.05
SHAPE_PROBS = tuple(
    RARE_SHAPE_PROB if s == RARE_SHAPE else (1.0 - RARE_SHAPE_PROB) / 3.0 for s in SHAPES
)
PAIRED_COLOUR = {"square": "red", "circle": "green", "triangle": "blue", "bar": "yellow"}

COLOUR_RGB = {
    "red": (0.85, 0.20, 0.20),
    "green": (0.20, 0.75, 0.25),
    "blue": (0.25, 0.35, 0.85),
    "yellow": (0.85, 0.80, 0.20),
}

RELATIONS = ("above", "beside")
CAPTION_WORDS = ("a",) + COLOURS + SHAPES + RELATIONS

TAG_DISTRACTORS = (
    "outdoor", "indoor", "sunny", "cloudy", "vivid", "pale", "photo", "sketch",
    "daytime", "night", "wide", "narrow", "blurry", "sharp", "bright", "dark",
    "stylish", "plain",
)
TAG_VOCAB = CONCEPTS + TAG_DISTRACTORS

BACKGROUND = 0.15
PIXEL_NOISE = 0.05
BRIGHTNESS_JITTER = (0.7, 1.1)


@dataclass
class SceneObject:
    shape: str
    colour: str
    cx: int
    cy: int
    size: int


@dataclass
class Scene:
    grid: np.ndarray  # [G, G, 3] floats in [0, 1]
    objects: list


@dataclass
class Sample:
    id: int
    image: np.ndarray  # [3, G, G] float64, channel-first for the models
    concepts: set
    tags: list
    caption: list
    objects: list = field(default=None, repr=False)


@dataclass
class DatasetSpec:
    n_samples: int
    seed: int
    grid: int = 32
    correlation: float = 0.0
    tag_noise: float = 0.1
    tag_drop: float = 0.1
    two_object_rate: float = 0.75
    train_fraction: float = 0.8

    def validate(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.grid < 12:
            raise ValueError("grid must be >= 12")
        for name in ("correlation", "tag_noise", "tag_drop", "two_object_rate", "train_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


def _sample_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def _canonical_key(obj):
    return (SHAPES.index(obj.shape), COLOURS.index(obj.colour))


def _shape_mask(shape, size, G, cx, cy):
    ys, xs = np.mgrid[0:G, 0:G]
    dx, dy = xs - cx, ys - cy
    if shape == "square":
        return (np.abs(dx) <= size) & (np.abs(dy) <= size)
    if shape == "circle":
        return dx * dx + dy * dy <= size * size
    if shape == "triangle":
        return (dy >= -size) & (dy <= size) & (np.abs(dx) <= (dy + size) / 2.0)
    if shape == "bar":
        return (np.abs(dx) <= size + 1) & (np.abs(dy) <= 1)
    raise ValueError(f"unknown shape {shape!r}")


def _place(rng, G, size, x_range, y_range):
    lo = size + 1
    hi = G - size - 2
    x0, x1 = max(x_range[0], lo), min(x_range[1], hi)
    y0, y1 = max(y_range[0], lo), min(y_range[1], hi)
    return int(rng.integers(x0, x1 + 1)), int(rng.integers(y0, y1 + 1))


def _render(rng, G, objects):
    grid = np.full((G, G, 3), BACKGROUND)
    for obj in objects:
        mask = _shape_mask(obj.shape, obj.size, G, obj.cx, obj.cy)
        brightness = rng.uniform(*BRIGHTNESS_JITTER)
        grid[mask] = np.asarray(COLOUR_RGB[obj.colour]) * brightness
    grid += rng.normal(0.0, PIXEL_NOISE, grid.shape)
    return np.clip(grid, 0.0, 1.0)


def concepts_for_objects(objects):
    """Concept set implied by an object list (the generator's own labels)."""
    out = {o.shape for o in objects} | {o.colour for o in objects}
    if len(objects) == 1:
        out.add("solo")
    elif len(objects) == 2:
        out.add("pair")
        if objects[0].shape == objects[1].shape:
            out.add("twins")
        if objects[0].colour == objects[1].colour:
            out.add("tones")
    return out


def caption_for(objects, relation=None):
    """Caption tokens for canonically ordered objects."""
    if len(objects) == 1:
        return ["a", objects[0].colour, objects[0].shape]
    first, second = objects
    return ["a", first.colour, first.shape, relation, "a", second.colour, second.shape]


def generate_sample(spec, index):
    rng = _sample_rng(spec.seed, index)
    n_obj = 2 if rng.random() < spec.two_object_rate else 1

    drafts = []
    for _ in range(n_obj):
        shape = SHAPES[rng.choice(len(SHAPES), p=SHAPE_PROBS)]
        if rng.random() < spec.correlation:
            colour = PAIRED_COLOUR[shape]
        else:
            colour = COLOURS[rng.choice(len(COLOURS))]
        size = int(rng.integers(2, 5))
        drafts.append(SceneObject(shape, colour, cx=0, cy=0, size=size))
    drafts.sort(key=_canonical_key)

    G = spec.grid
    relation = None
    if n_obj == 1:
        drafts[0].cx, drafts[0].cy = _place(rng, G, drafts[0].size, (0, G), (0, G))
    else:
        relation = RELATIONS[int(rng.integers(0, 2))]
        a, b = drafts
        if relation == "above":
            a.cx, a.cy = _place(rng, G, a.size, (0, G), (0, G // 2 - 2))
            b.cx, b.cy = _place(rng, G, b.size, (0, G), (G // 2 + 2, G))
        else:
            a.cx, a.cy = _place(rng, G, a.size, (0, G // 2 - 2), (0, G))
            b.cx, b.cy = _place(rng, G, b.size, (G // 2 + 2, G), (0, G))

    grid = _render(rng, G, drafts).astype(np.float32).astype(np.float64)
    concepts = concepts_for_objects(drafts)
    caption = caption_for(drafts, relation)

    tags = []
    for tag in TAG_VOCAB:
        if tag in concepts:
            if rng.random() >= spec.tag_drop:
                tags.append(tag)
        elif rng.random() < spec.tag_noise:
            tags.append(tag)

    # generation self-check: stored labels must match the object list
    assert concepts == concepts_for_objects(drafts)
    assert all(w in CAPTION_WORDS for w in caption)

    return Sample(
        id=index,
        image=np.ascontiguousarray(grid.transpose(2, 0, 1)),
        concepts=concepts,
        tags=tags,
        caption=caption,
        objects=drafts,
    )


def gen_dataset(spec):
    """Generate (train, test, concept vocabulary with train frequencies)."""
    spec.validate()
    samples = [generate_sample(spec, i) for i in range(spec.n_samples)]
    split_rng = np.random.default_rng([spec.seed, 0x5EED])
    perm = split_rng.permutation(spec.n_samples)
    n_train = int(round(spec.train_fraction * spec.n_samples))
    train_ids = set(perm[:n_train].tolist())
    train = [s for s in samples if s.id in train_ids]
    test = [s for s in samples if s.id not in train_ids]
    freqs = {c: 0 for c in CONCEPTS}
    for s in train:
        for c in s.concepts:
            freqs[c] += 1
    return train, test, LabelVocabulary(list(CONCEPTS), freqs)


def concept_vocab_from_captions(samples, top_k):
    """Most frequent caption words as a concept vocabulary.

    Returns (vocabulary with per-word caption counts, coverage), where
    coverage is the fraction of word occurrences the kept words explain.
    """
    counts = {}
    for s in samples:
        for w in s.caption:
            counts[w] = counts.get(w, 0) + 1
    if top_k > len(counts):
        raise ValueError(f"top_k={top_k} exceeds the {len(counts)} distinct caption words")
    ranked = sorted(counts, key=lambda w: (-counts[w], w))
    kept = ranked[:top_k]
    total = sum(counts.values())
    coverage = sum(counts[w] for w in kept) / total if total else 0.0
    return LabelVocabulary(kept, {w: counts[w] for w in kept}), coverage


def caption_word_vocab(samples):
    """Decoder vocabulary over every caption word seen, with frequencies."""
    counts = {}
    for s in samples:
        for w in s.caption:
            counts[w] = counts.get(w, 0) + 1
    words = sorted(counts)
    return LabelVocabulary(words, counts)


def concept_vector(sample, vocab):
    """Binary indicator over vocab labels for a sample's concept set."""
    v = np.zeros(len(vocab.labels))
    for c in sample.concepts:
        if c in vocab:
            v[vocab.id_of(c)] = 1.0
    return v


def caption_concept_set(sample, vocab):
    """Caption words that are in the concept vocabulary (captioning labels)."""
    return {w for w in sample.caption if w in vocab}


def tag_vector(sample):
    v = np.zeros(len(TAG_VOCAB))
    for t in sample.tags:
        v[TAG_VOCAB.index(t)] = 1.0
    return v


# ---------------------------------------------------------------------------
# file formats: JSONL datasets and JSON vocabularies


def _encode_image(image_chw):
    hwc = np.ascontiguousarray(image_chw.transpose(1, 2, 0), dtype="<f4")
    return base64.b64encode(hwc.tobytes()).decode("ascii")


def _decode_image(data, grid):
    flat = np.frombuffer(base64.b64decode(data), dtype="<f4")
    if flat.size != grid * grid * 3:
        raise ValueError(f"image payload has {flat.size} floats, expected {grid * grid * 3}")
    hwc = flat.reshape(grid, grid, 3).astype(np.float64)
    return np.ascontiguousarray(hwc.transpose(2, 0, 1))


def save_dataset(samples, path):
    """One JSON record per line: {id, image, concepts, tags, caption}."""
    with open(path, "w") as fh:
        for s in samples:
            rec = {
                "id": s.id,
                "image": _encode_image(s.image),
                "concepts": sorted(s.concepts),
                "tags": list(s.tags),
                "caption": list(s.caption),
            }
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def load_dataset(path, grid):
    samples = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            samples.append(
                Sample(
                    id=int(rec["id"]),
                    image=_decode_image(rec["image"], grid),
                    concepts=set(rec["concepts"]),
                    tags=list(rec["tags"]),
                    caption=list(rec["caption"]),
                )
            )
    return samples


def save_vocab(vocab, path):
    doc = {
        "labels": vocab.labels,
        "frequencies": vocab.frequencies,
        "start_id": vocab.start_id,
        "end_id": vocab.end_id,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_vocab(path):
    with open(path) as fh:
        doc = json.load(fh)
    vocab = LabelVocabulary(doc["labels"], doc["frequencies"])
    if doc.get("start_id") != vocab.start_id or doc.get("end_id") != vocab.end_id:
        raise ValueError(f"{path}: special token ids do not match the label count")
    return vocab
