import base64
import json
from collections import Counter

import numpy as np
import pytest

from conceptseq import synthdata
from conceptseq.synthdata import (
    COLOURS,
    CONCEPTS,
    PAIRED_COLOUR,
    SHAPES,
    DatasetSpec,
    caption_word_vocab,
    concept_vocab_from_captions,
    concepts_for_objects,
    gen_dataset,
    generate_sample,
    load_dataset,
    load_vocab,
    save_dataset,
    save_vocab,
)


def spec(**kw):
    base = dict(n_samples=50, seed=123, grid=16)
    base.update(kw)
    return DatasetSpec(**base)


def test_generation_is_deterministic():
    a = [generate_sample(spec(), i) for i in range(20)]
    b = [generate_sample(spec(), i) for i in range(20)]
    for s, t in zip(a, b):
        assert np.array_equal(s.image, t.image)
        assert s.concepts == t.concepts and s.tags == t.tags and s.caption == t.caption


def test_full_correlation_pairs_colour_with_shape():
    sp = spec(correlation=1.0, n_samples=300)
    for i in range(300):
        for obj in generate_sample(sp, i).objects:
            assert obj.colour == PAIRED_COLOUR[obj.shape]


def test_zero_correlation_is_independent_at_object_level():
    sp = spec(correlation=0.0, n_samples=10000, two_object_rate=0.5)
    objs = [o for i in range(10000) for o in generate_sample(sp, i).objects]
    n = len(objs)
    for shape, colour in (("square", "red"), ("circle", "green")):
        p_shape = sum(o.shape == shape for o in objs) / n
        p_colour = sum(o.colour == colour for o in objs) / n
        both = sum(o.shape == shape and o.colour == colour for o in objs) / n
        indep = p_shape * p_colour
        sigma = np.sqrt(indep * (1 - indep) / n)
        assert abs(both - indep) <= 3 * sigma


def test_rare_shape_frequency():
    sp = spec(correlation=0.0, n_samples=8000)
    objs = [o for i in range(8000) for o in generate_sample(sp, i).objects]
    rate = sum(o.shape == "bar" for o in objs) / len(objs)
    assert 0.03 < rate < 0.07


def test_stored_concepts_match_objects():
    sp = spec(n_samples=100, correlation=0.5)
    for i in range(100):
        s = generate_sample(sp, i)
        assert s.concepts == concepts_for_objects(s.objects)


def test_caption_grammar_and_truthfulness():
    sp = spec(n_samples=200, two_object_rate=0.6)
    for i in range(200):
        s = generate_sample(sp, i)
        cap = s.caption
        if len(s.objects) == 1:
            assert len(cap) == 3
            assert cap[0] == "a" and cap[1] in COLOURS and cap[2] in SHAPES
            mentioned = [(cap[1], cap[2])]
        else:
            assert len(cap) == 7
            assert cap[0] == cap[4] == "a" and cap[3] in ("above", "beside")
            mentioned = [(cap[1], cap[2]), (cap[5], cap[6])]
        assert mentioned == [(o.colour, o.shape) for o in s.objects]


def test_layout_matches_relation_word():
    sp = spec(n_samples=200, two_object_rate=1.0)
    for i in range(200):
        s = generate_sample(sp, i)
        first, second = s.objects
        if s.caption[3] == "above":
            assert first.cy < second.cy
        else:
            assert first.cx < second.cx


def test_object_count_knob():
    all_solo = spec(two_object_rate=0.0, n_samples=40)
    assert all(len(generate_sample(all_solo, i).objects) == 1 for i in range(40))
    all_pairs = spec(two_object_rate=1.0, n_samples=40)
    assert all(len(generate_sample(all_pairs, i).objects) == 2 for i in range(40))


def test_tag_noise_and_drop_extremes():
    no_tags = spec(tag_drop=1.0, tag_noise=0.0)
    for i in range(30):
        assert generate_sample(no_tags, i).tags == []
    spammy = spec(tag_drop=0.0, tag_noise=1.0)
    for i in range(30):
        assert set(generate_sample(spammy, i).tags) == set(synthdata.TAG_VOCAB)


def test_split_sizes_and_disjointness():
    train, test, vocab = gen_dataset(spec(n_samples=100))
    assert len(train) == 80 and len(test) == 20
    assert {s.id for s in train}.isdisjoint({s.id for s in test})


def test_frequencies_counted_on_train_only():
    train, test, vocab = gen_dataset(spec(n_samples=120, correlation=0.3))
    recount = Counter(c for s in train for c in s.concepts)
    assert vocab.frequencies == {c: recount.get(c, 0) for c in CONCEPTS}


def test_dataset_file_roundtrip(tmp_path):
    train, _, _ = gen_dataset(spec(n_samples=12))
    path = tmp_path / "train.jsonl"
    save_dataset(train, path)
    loaded = load_dataset(path, 16)
    for a, b in zip(train, loaded):
        assert a.id == b.id and a.concepts == b.concepts
        assert a.tags == b.tags and a.caption == b.caption
        assert np.array_equal(a.image, b.image)
    # rewriting the loaded samples reproduces the same bytes
    path2 = tmp_path / "again.jsonl"
    save_dataset(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_record_payload_is_little_endian_float32_hwc(tmp_path):
    sample = generate_sample(spec(), 0)
    path = tmp_path / "one.jsonl"
    save_dataset([sample], path)
    rec = json.loads(path.read_text().splitlines()[0])
    assert set(rec) == {"id", "image", "concepts", "tags", "caption"}
    flat = np.frombuffer(base64.b64decode(rec["image"]), dtype="<f4")
    assert flat.size == 16 * 16 * 3
    hwc = flat.reshape(16, 16, 3).astype(np.float64)
    np.testing.assert_array_equal(hwc.transpose(2, 0, 1), sample.image)


def test_wrong_grid_rejected_on_load(tmp_path):
    train, _, _ = gen_dataset(spec(n_samples=5))
    path = tmp_path / "train.jsonl"
    save_dataset(train, path)
    with pytest.raises(ValueError):
        load_dataset(path, 32)


def test_vocab_file_roundtrip(tmp_path):
    _, _, vocab = gen_dataset(spec(n_samples=30))
    path = tmp_path / "vocab.json"
    save_vocab(vocab, path)
    loaded = load_vocab(path)
    assert loaded.labels == vocab.labels
    assert loaded.frequencies == vocab.frequencies
    doc = json.loads(path.read_text())
    doc["start_id"] = 99
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        load_vocab(bad)


def test_caption_concept_vocab_ranking_matches_counter():
    train, _, _ = gen_dataset(spec(n_samples=150, two_object_rate=0.7))
    counts = Counter(w for s in train for w in s.caption)
    vocab, coverage = concept_vocab_from_captions(train, 5)
    expected = sorted(counts, key=lambda w: (-counts[w], w))[:5]
    assert vocab.labels == expected
    assert vocab.frequencies == {w: counts[w] for w in expected}
    assert 0 < coverage < 1

    full, cov_full = concept_vocab_from_captions(train, len(counts))
    assert cov_full == 1.0
    with pytest.raises(ValueError):
        concept_vocab_from_captions(train, len(counts) + 1)


def test_word_vocab_covers_all_caption_words():
    train, _, _ = gen_dataset(spec(n_samples=80))
    vocab = caption_word_vocab(train)
    used = {w for s in train for w in s.caption}
    assert set(vocab.labels) == used


def test_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec(n_samples=0, seed=1).validate()
    with pytest.raises(ValueError):
        DatasetSpec(n_samples=5, seed=1, correlation=1.5).validate()
    with pytest.raises(ValueError):
        DatasetSpec(n_samples=5, seed=1, grid=4).validate()


def test_concept_and_tag_vector_helpers():
    train, _, vocab = gen_dataset(spec(n_samples=10))
    s = train[0]
    v = synthdata.concept_vector(s, vocab)
    assert {vocab.labels[j] for j in np.flatnonzero(v)} == s.concepts
    tv = synthdata.tag_vector(s)
    assert {synthdata.TAG_VOCAB[j] for j in np.flatnonzero(tv)} == set(s.tags)
