"""Numpy/python implementations of the retrieval scoring kernels.

Expression order mirrors the compiled extension exactly so both backends
produce bit-identical scores.
"""

from __future__ import annotations

import numpy as np


def bm25_accumulate(scores, passage_idxs, tfs, doc_lens, idf, k1, b, avg_len):
    """Add one query term's BM25 contribution to the running scores.

    scores is indexed by passage position; passage_idxs/tfs are the term's
    postings (parallel arrays).
    """
    lens = doc_lens[passage_idxs]
    norm = tfs + k1 * (1.0 - b + b * lens / avg_len)
    scores[passage_idxs] += idf * (tfs * (k1 + 1.0) / norm)


def phrase_occurs(tokens, phrase) -> bool:
    """True when phrase occurs contiguously and in order inside tokens."""
    n = tokens.shape[0]
    m = phrase.shape[0]
    if m == 0 or m > n:
        return False
    first = phrase[0]
    for i in range(n - m + 1):
        if tokens[i] == first and np.array_equal(tokens[i : i + m], phrase):
            return True
    return False
