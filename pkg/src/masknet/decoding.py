"""CTC best-path and prefix beam-search decoding (no language model)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple
    score: float  # natural-log probability of the collapsed prefix


def _as_array(logprobs):
    lp = np.asarray(getattr(logprobs, "data", logprobs), dtype=np.float64)
    if lp.ndim != 2:
        raise ContractError(f"decoder expects [T, V+1] log-probabilities, got shape {lp.shape}")
    return lp


def greedy_decode(logprobs):
    """Frame argmax, merge adjacent repeats, drop blanks.

    Ties go to the lowest class index (numpy's argmax rule).
    """
    lp = _as_array(logprobs)
    blank = lp.shape[1] - 1
    out, prev = [], None
    for k in np.argmax(lp, axis=1):
        k = int(k)
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def beam_decode(logprobs, beam_width=512):
    """CTC prefix beam search.

    The beam holds ``(prefix, ends_in_blank)`` states, each carrying the
    log-probability of all surviving frame paths that reach it. Keeping
    the blank/non-blank split per state (rather than per prefix) makes a
    width-1 search follow a single frame path, i.e. exactly the greedy
    decoder. When the beam is wide enough to hold every state, the
    returned prefix probability is exact.

    Candidate ties are broken by frame symbol (lowest index first), then
    by generation order.
    """
    if beam_width < 1:
        raise ContractError(f"beam_width must be >= 1, got {beam_width}")
    lp = _as_array(logprobs)
    T, V1 = lp.shape
    blank = V1 - 1
    ninf = -np.inf
    symbols = np.arange(blank)

    prefixes = [()]
    ends_blank = np.array([True])
    scores = np.array([0.0])
    for t in range(T):
        row = lp[t]
        index = {}
        u_of = np.fromiter((index.setdefault(p, len(index)) for p in prefixes), dtype=np.int64, count=len(prefixes))
        uniq = list(index)
        U = len(uniq)
        s_blank = np.full(U, ninf)
        s_label = np.full(U, ninf)
        s_blank[u_of[ends_blank]] = scores[ends_blank]
        s_label[u_of[~ends_blank]] = scores[~ends_blank]
        last = np.array([p[-1] if p else -1 for p in uniq], dtype=np.int64)

        to_blank = np.logaddexp(s_blank, s_label) + row[blank]
        to_label = np.where(last >= 0, s_label + row[last], ninf)
        # a label equal to the prefix's last one only extends after a blank
        from_label = np.where(symbols[None, :] != last[:, None], s_label[:, None] + row[None, :blank], ninf)
        extend = np.logaddexp(s_blank[:, None] + row[None, :blank], from_label)
        for u, p in enumerate(uniq):
            if p:
                parent = index.get(p[:-1])
                if parent is not None:
                    to_label[u] = np.logaddexp(to_label[u], extend[parent, p[-1]])
                    extend[parent, p[-1]] = ninf

        cand = np.concatenate([to_blank, to_label, extend.reshape(-1)])
        cand_symbol = np.concatenate([np.full(U, blank), np.where(last >= 0, last, blank), np.tile(symbols, U)])
        order = np.arange(cand.size)
        live = np.flatnonzero(cand > ninf)
        ranked = live[np.lexsort((order[live], cand_symbol[live], -cand[live]))][:beam_width]

        new_prefixes = []
        for c in ranked:
            if c < U:
                new_prefixes.append(uniq[c])
            elif c < 2 * U:
                new_prefixes.append(uniq[c - U])
            else:
                u, k = divmod(int(c - 2 * U), blank)
                new_prefixes.append(uniq[u] + (k,))
        prefixes = new_prefixes
        ends_blank = ranked < U
        scores = cand[ranked]

    final = {}
    for p, s in zip(prefixes, scores):
        final[p] = np.logaddexp(final[p], s) if p in final else s
    best = max(final, key=lambda p: final[p])  # first maximum in beam order
    return Hypothesis(tuple(best), float(final[best]))


def prefix_scores_exhaustive(logprobs):
    """Exact log-probability of every collapsed prefix, by path enumeration.

    Exponential in T; an oracle for tests on tiny instances.
    """
    import itertools

    lp = _as_array(logprobs)
    T, V1 = lp.shape
    blank = V1 - 1
    acc = {}
    for path in itertools.product(range(V1), repeat=T):
        out, prev = [], None
        for k in path:
            if k != prev and k != blank:
                out.append(k)
            prev = k
        key = tuple(out)
        s = sum(lp[t, k] for t, k in enumerate(path))
        acc[key] = np.logaddexp(acc[key], s) if key in acc else s
    return acc
