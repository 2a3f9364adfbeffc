"""Evaluation metrics: multi-label precision/recall/F1 and BLEU.

Overall (O-) metrics average each sample's set precision
|truth ∩ prediction| / |prediction| and recall over |truth| across the
corpus; per-class (C-) metrics count true/false positives per class over
the whole corpus and average across classes. F1 is always the harmonic
mean of the *averaged* precision and recall. Degenerate cases: an empty
prediction scores precision 0 (silence is penalised); classes that never
occur in the truth are left out of the recall average.

BLEU-n is the geometric mean of clipped n-gram precisions up to order n
times the brevity penalty exp(min(0, 1 - r/c)); if any order has zero
precision the score is 0 (no smoothing).
"""

import math
import warnings
from collections import Counter
from dataclasses import dataclass


@dataclass
class MultiLabelReport:
    c_p: float
    c_r: float
    c_f1: float
    o_p: float
    o_r: float
    o_f1: float

    def as_dict(self):
        return {
            "C-P": self.c_p, "C-R": self.c_r, "C-F1": self.c_f1,
            "O-P": self.o_p, "O-R": self.o_r, "O-F1": self.o_f1,
        }


def _f1(p, r):
    return 0.0 if p + r == 0.0 else 2.0 * p * r / (p + r)


def multilabel_report(predictions, truths, labels):
    """Score predicted label sets against ground-truth sets.

    `predictions` and `truths` are equal-length lists of sets over the
    class list `labels`.
    """
    if len(predictions) != len(truths):
        raise ValueError(
            f"multilabel_report: {len(predictions)} predictions vs {len(truths)} truths"
        )
    label_set = set(labels)
    for sets in (predictions, truths):
        for s in sets:
            unknown = s - label_set
            if unknown:
                raise ValueError(f"labels outside the vocabulary: {sorted(unknown)}")

    o_p = o_r = 0.0
    tp = {lab: 0 for lab in labels}
    fp = {lab: 0 for lab in labels}
    fn = {lab: 0 for lab in labels}
    for pred, truth in zip(predictions, truths):
        hit = len(pred & truth)
        o_p += hit / len(pred) if pred else 0.0
        o_r += hit / len(truth) if truth else 0.0
        for lab in pred & truth:
            tp[lab] += 1
        for lab in pred - truth:
            fp[lab] += 1
        for lab in truth - pred:
            fn[lab] += 1
    n = len(predictions)
    o_p, o_r = o_p / n, o_r / n

    c_p_sum = 0.0
    c_r_sum, c_r_n = 0.0, 0
    for lab in labels:
        predicted = tp[lab] + fp[lab]
        c_p_sum += tp[lab] / predicted if predicted else 0.0
        actual = tp[lab] + fn[lab]
        if actual:
            c_r_sum += tp[lab] / actual
            c_r_n += 1
    c_p = c_p_sum / len(labels) if labels else 0.0
    c_r = c_r_sum / c_r_n if c_r_n else 0.0

    return MultiLabelReport(c_p, c_r, _f1(c_p, c_r), o_p, o_r, _f1(o_p, o_r))


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _clipped_hits(candidate, references, order):
    cand = _ngram_counts(candidate, order)
    if not cand:
        return 0, 0
    best = Counter()
    for ref in references:
        counts = _ngram_counts(ref, order)
        for gram in cand:
            best[gram] = max(best[gram], counts[gram])
    hits = sum(min(count, best[gram]) for gram, count in cand.items())
    return hits, sum(cand.values())


def _closest_ref_len(c, references):
    return min((len(r) for r in references), key=lambda rl: (abs(rl - c), rl))


def bleu(candidate, references, n=4):
    """BLEU-n of one candidate against one or more references, in [0, 1]."""
    if not 1 <= n <= 4:
        raise ValueError(f"bleu: order must be in 1..4, got {n}")
    if not references:
        raise ValueError("bleu: at least one reference is required")
    if not candidate:
        warnings.warn("bleu: empty candidate scores 0", stacklevel=2)
        return 0.0
    log_sum = 0.0
    for order in range(1, n + 1):
        hits, total = _clipped_hits(candidate, references, order)
        if hits == 0:
            return 0.0
        log_sum += math.log(hits / total)
    c = len(candidate)
    r = _closest_ref_len(c, references)
    bp = math.exp(min(0.0, 1.0 - r / c))
    return bp * math.exp(log_sum / n)


def corpus_bleu(candidates, references_list, n=4):
    """Corpus-level BLEU-n: n-gram counts pooled over all pairs before the
    geometric mean, the standard aggregate for benchmark captions."""
    if not 1 <= n <= 4:
        raise ValueError(f"bleu: order must be in 1..4, got {n}")
    if len(candidates) != len(references_list):
        raise ValueError("corpus_bleu: candidate/reference length mismatch")
    log_sum = 0.0
    for order in range(1, n + 1):
        hits = total = 0
        for cand, refs in zip(candidates, references_list):
            h, t = _clipped_hits(cand, refs, order)
            hits += h
            total += t
        if hits == 0 or total == 0:
            return 0.0
        log_sum += math.log(hits / total)
    c = sum(len(cand) for cand in candidates)
    r = sum(_closest_ref_len(len(cand), refs) for cand, refs in zip(candidates, references_list))
    if c == 0:
        return 0.0
    bp = math.exp(min(0.0, 1.0 - r / c))
    return bp * math.exp(log_sum / n)
