import numpy as np
import pytest

from conceptseq.labelseq import (
    END_TOKEN,
    START_TOKEN,
    LabelVocabulary,
    rare_first_order,
    sequence_to_set,
)


@pytest.fixture
def vocab():
    return LabelVocabulary(
        ["map", "sky", "water", "person"],
        {"map": 60, "sky": 74190, "water": 35264, "person": 10000},
    )


def test_special_ids_are_last_two(vocab):
    assert vocab.start_id == 4
    assert vocab.end_id == 5
    assert vocab.size == 6
    assert vocab.label_of(vocab.start_id) == START_TOKEN
    assert vocab.label_of(vocab.end_id) == END_TOKEN


def test_rare_first_imbalanced_pair(vocab):
    seq = rare_first_order({"sky", "map"}, vocab)
    assert [vocab.label_of(t) for t in seq[:-1]] == ["map", "sky"]
    assert seq[-1] == vocab.end_id


def test_empty_set_is_just_end(vocab):
    assert rare_first_order(set(), vocab) == [vocab.end_id]


def test_equal_frequency_ties_break_lexicographically():
    v = LabelVocabulary(["b", "a", "c"], {"a": 5, "b": 5, "c": 1})
    seq = rare_first_order({"a", "b", "c"}, v)
    assert [v.label_of(t) for t in seq[:-1]] == ["c", "a", "b"]


def test_unknown_label_raises(vocab):
    with pytest.raises(KeyError):
        rare_first_order({"dragon"}, vocab)


def test_frequent_first_flag(vocab):
    seq = rare_first_order({"sky", "map", "person"}, vocab, order="frequent-first")
    assert [vocab.label_of(t) for t in seq[:-1]] == ["sky", "person", "map"]
    with pytest.raises(ValueError):
        rare_first_order(set(), vocab, order="sideways")


def test_sequence_to_set_basics(vocab):
    seq = rare_first_order({"map", "sky"}, vocab)
    assert sequence_to_set(seq, vocab) == {"map", "sky"}
    assert sequence_to_set([vocab.end_id], vocab) == set()


def test_sequence_to_set_stops_at_first_end_and_drops_specials(vocab):
    seq = [vocab.start_id, 0, 0, 1, vocab.end_id, 2, vocab.end_id]
    assert sequence_to_set(seq, vocab) == {"map", "sky"}


def test_roundtrip_identity_random_sets(vocab):
    rng = np.random.default_rng(0)
    labels = vocab.labels
    for _ in range(1000):
        subset = {lab for lab in labels if rng.random() < 0.5}
        assert sequence_to_set(rare_first_order(subset, vocab), vocab) == subset


def test_order_soundness_random_sets(vocab):
    rng = np.random.default_rng(1)
    for _ in range(200):
        subset = {lab for lab in vocab.labels if rng.random() < 0.6}
        seq = rare_first_order(subset, vocab)
        freqs = [vocab.frequencies[vocab.label_of(t)] for t in seq[:-1]]
        assert freqs == sorted(freqs)


def test_vocabulary_validation():
    with pytest.raises(ValueError):
        LabelVocabulary(["a", "a"])
    with pytest.raises(ValueError):
        LabelVocabulary([START_TOKEN])
    with pytest.raises(ValueError):
        LabelVocabulary(["a"], {"b": 1})
    with pytest.raises(ValueError):
        LabelVocabulary(["a"], {"a": -2})
    v = LabelVocabulary(["a"])
    with pytest.raises(KeyError):
        v.id_of("z")
    with pytest.raises(KeyError):
        v.label_of(7)
