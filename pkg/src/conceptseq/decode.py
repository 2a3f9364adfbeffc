"""Inference: greedy decoding for label sets, beam search for captions.

Both start from the interface embedding (via the model's initial-state
projection), feed the start token, and step the decoder. Scores are raw
sums of stepwise log-probabilities with no length normalisation. Ties
are broken towards the lowest token id; candidate ordering inside the
beam is fully deterministic.

Greedy label decoding masks tokens it has already emitted (except END)
so the output is a duplicate-free set; caption decoding leaves masking
off because words may legitimately repeat.
"""

import numpy as np

from .autodiff import Tensor
from .lstm import LSTMState, decoder_step
from .seqmodel import init_state_from_embedding


def _end_id(model, end_token):
    return model.out.n_out - 1 if end_token is None else end_token


def greedy_decode(model, embedding, max_len, mask_emitted=True, end_token=None):
    """Argmax decoding; emits at most `max_len` tokens then forces END.

    Returns the token-id sequence, END included and terminal.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    end = _end_id(model, end_token)
    state = init_state_from_embedding(np.asarray(embedding, dtype=np.float64),
                                      model.init_proj)
    token = model.out.n_out - 2  # start token
    seq = []
    for _ in range(max_len):
        y, state = decoder_step(token, state, model.embed, model.out, model.lstm)
        probs = y.data.copy()
        if mask_emitted:
            for t in seq:
                if t != end:
                    probs[t] = -1.0
        token = int(np.argmax(probs))
        seq.append(token)
        if token == end:
            return seq
    seq.append(end)
    return seq


def greedy_decode_batch(model, embeddings, max_len, mask_emitted=True, end_token=None):
    """Row-wise greedy decoding of a [N, F] embedding matrix."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = embeddings.shape[0]
    end = _end_id(model, end_token)
    V = model.out.n_out
    state = init_state_from_embedding(embeddings, model.init_proj)
    tokens = np.full(n, V - 2, dtype=np.int64)
    masked = np.zeros((n, V), dtype=bool)
    done = np.zeros(n, dtype=bool)
    seqs = [[] for _ in range(n)]
    for _ in range(max_len):
        y, state = decoder_step(tokens, state, model.embed, model.out, model.lstm)
        probs = y.data.copy()
        if mask_emitted:
            probs[masked] = -1.0
        tokens = probs.argmax(axis=1)
        for i in range(n):
            if done[i]:
                continue
            t = int(tokens[i])
            seqs[i].append(t)
            if t == end:
                done[i] = True
            elif mask_emitted:
                masked[i, t] = True
        if done.all():
            break
    for i in range(n):
        if not done[i]:
            seqs[i].append(end)
    return seqs


def replay_logprob(model, embedding, tokens, end_token=None):
    """Sum of stepwise log-probabilities of an existing token sequence."""
    state = init_state_from_embedding(np.asarray(embedding, dtype=np.float64),
                                      model.init_proj)
    token = model.out.n_out - 2
    total = 0.0
    for t in tokens:
        y, state = decoder_step(token, state, model.embed, model.out, model.lstm)
        with np.errstate(divide="ignore"):
            total += float(np.log(y.data[t]))
        token = t
    return total


def beam_search(model, embedding, width, max_len, end_token=None):
    """Length-bounded beam search over summed log-probabilities.

    Hypotheses that emit END are frozen and compete on total
    log-probability; the best completed hypothesis wins, or the best
    partial one if nothing completed within `max_len` steps. Returns
    (token list, log-probability); completed sequences include END.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    end = _end_id(model, end_token)
    embedding = np.asarray(embedding, dtype=np.float64)
    state0 = init_state_from_embedding(embedding, model.init_proj)
    start = model.out.n_out - 2

    # hypothesis: (tokens tuple, logp, h row [H], c row [H])
    active = [((), 0.0, state0.h.data, state0.c.data)]
    best_done = None  # (logp, tokens)

    for _ in range(max_len):
        if not active:
            break
        h = Tensor(np.stack([hyp[2] for hyp in active]))
        c = Tensor(np.stack([hyp[3] for hyp in active]))
        prev = np.array([hyp[0][-1] if hyp[0] else start for hyp in active], dtype=np.int64)
        y, state = decoder_step(prev, LSTMState(h, c), model.embed, model.out, model.lstm)
        with np.errstate(divide="ignore"):
            logy = np.log(y.data)
        scores = np.array([hyp[1] for hyp in active])[:, None] + logy

        flat = scores.reshape(-1)
        take = min(width, flat.size)
        # stable sort of -score keeps (hypothesis rank, token id) order on ties
        top = np.argsort(-flat, kind="stable")[:take]
        next_active = []
        for pos in top:
            hyp_i, tok = divmod(int(pos), logy.shape[1])
            tokens = active[hyp_i][0] + (tok,)
            logp = float(flat[pos])
            if tok == end:
                if best_done is None or logp > best_done[0]:
                    best_done = (logp, list(tokens))
            else:
                next_active.append(
                    (tokens, logp, state.h.data[hyp_i].copy(), state.c.data[hyp_i].copy())
                )
        active = next_active
        if best_done is not None and active and best_done[0] >= active[0][1]:
            # extensions only lower a hypothesis' score, so nothing can win
            break

    if best_done is not None:
        return best_done[1], best_done[0]
    best = max(active, key=lambda hyp: hyp[1]) if active else ([], -np.inf, None, None)
    return list(best[0]), best[1]
