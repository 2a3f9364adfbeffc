"""Label vocabularies and set <-> ordered-sequence conversion.

Decoders emit token ids over a vocabulary of V = len(labels) + 2 entries:
the labels occupy dense ids 0..V-3, the start token is fixed at V-2 and
the end token at V-1 (this layout is also how vocabulary files are
written). Training sequences order a label set by ascending training-set
frequency ("rare first"), ties broken by the label string so targets are
reproducible.
"""

START_TOKEN = "<START>"
END_TOKEN = "<END>"


class LabelVocabulary:
    """Ordered label list with training frequencies and fixed special ids."""

    def __init__(self, labels, frequencies=None):
        labels = list(labels)
        if len(set(labels)) != len(labels):
            raise ValueError("vocabulary labels must be unique")
        if START_TOKEN in labels or END_TOKEN in labels:
            raise ValueError("special tokens cannot appear as labels")
        self.labels = labels
        self.frequencies = {lab: 0 for lab in labels}
        if frequencies:
            for lab, n in frequencies.items():
                if lab not in self.frequencies:
                    raise ValueError(f"frequency given for unknown label {lab!r}")
                if n < 0:
                    raise ValueError(f"negative frequency for {lab!r}")
                self.frequencies[lab] = int(n)
        self._ids = {lab: i for i, lab in enumerate(labels)}

    @property
    def start_id(self):
        return len(self.labels)

    @property
    def end_id(self):
        return len(self.labels) + 1

    @property
    def size(self):
        """Decoder vocabulary size including the start and end tokens."""
        return len(self.labels) + 2

    def id_of(self, label):
        try:
            return self._ids[label]
        except KeyError:
            raise KeyError(f"unknown label {label!r}") from None

    def label_of(self, token_id):
        if 0 <= token_id < len(self.labels):
            return self.labels[token_id]
        if token_id == self.start_id:
            return START_TOKEN
        if token_id == self.end_id:
            return END_TOKEN
        raise KeyError(f"token id {token_id} out of range")

    def __contains__(self, label):
        return label in self._ids

    def __len__(self):
        return self.size


def rare_first_order(labels, vocab, order="rare-first"):
    """Turn an unordered label set into a token-id sequence ending in END.

    Labels are sorted by ascending training frequency (descending for
    order="frequent-first"), ties by label string.
    """
    if order not in ("rare-first", "frequent-first"):
        raise ValueError(f"unknown ordering {order!r}")
    for lab in labels:
        if lab not in vocab:
            raise KeyError(f"unknown label {lab!r}")
    sign = 1 if order == "rare-first" else -1
    ordered = sorted(labels, key=lambda lab: (sign * vocab.frequencies[lab], lab))
    return [vocab.id_of(lab) for lab in ordered] + [vocab.end_id]


def sequence_to_set(sequence, vocab):
    """Labels named before the first END token, duplicates and specials dropped."""
    out = set()
    for token in sequence:
        if token == vocab.end_id:
            break
        if token == vocab.start_id:
            continue
        out.add(vocab.label_of(token))
    return out
