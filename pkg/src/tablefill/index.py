"""BM25 inverted index over passages with an exact-phrase boost.

Scoring: for a bag of case-folded query terms,

    score(P) = sum_t idf(t) * tf(t,P)*(k1+1) / (tf(t,P) + k1*(1 - b + b*len(P)/avg_len))
             + boost_weight * |{phrases occurring contiguously and in order in P}|

with idf(t) = ln(1 + (N - df(t) + 0.5)/(df(t) + 0.5)) and k1=1.2, b=0.75.
Each occurrence of a term in the query bag contributes; each phrase counts
once regardless of how often it occurs. Only passages with score > 0 are
returned, sorted by score descending then passage_id ascending.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .corpus import Passage, tokenize

BM25_K1 = 1.2
BM25_B = 0.75

INDEX_FORMAT = "tablefill-index"
INDEX_VERSION = 1


@dataclass(frozen=True)
class CompoundQuery:
    bag_terms: tuple[str, ...]
    exact_phrases: tuple[tuple[str, ...], ...] = ()
    boost_weight: float = 1.0

    def validate(self) -> None:
        if self.boost_weight < 0:
            raise ValueError("boost_weight must be >= 0")
        for phrase in self.exact_phrases:
            if len(phrase) < 1:
                raise ValueError("exact phrases must be non-empty")


@dataclass(frozen=True)
class RetrievalHit:
    passage_id: str
    ir_score: float


@dataclass
class IndexedCorpus:
    """Immutable after build; safe for concurrent retrieval."""

    passage_ids: list[str] = field(default_factory=list)
    store: dict[str, Passage] = field(default_factory=dict)
    vocab: dict[str, int] = field(default_factory=dict)
    # per term id: (passage positions, term frequencies), parallel arrays
    postings: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    token_ids: list[np.ndarray] = field(default_factory=list)
    doc_lens: np.ndarray = field(default_factory=lambda: np.zeros(0))
    avg_len: float = 0.0

    @property
    def size(self) -> int:
        return len(self.passage_ids)


def build_index(passages) -> IndexedCorpus:
    """Build the inverted index from a passage stream.

    Terms are case-folded; raises on a duplicate passage_id.
    """
    idx = IndexedCorpus()
    raw_postings: list[dict[int, int]] = []
    lens: list[float] = []
    for p in passages:
        if p.passage_id in idx.store:
            raise ValueError(f"duplicate passage_id: {p.passage_id!r}")
        pos = len(idx.passage_ids)
        idx.passage_ids.append(p.passage_id)
        idx.store[p.passage_id] = p
        tids = np.empty(len(p.tokens), dtype=np.intc)
        counts: dict[int, int] = {}
        for j, tok in enumerate(p.tokens):
            term = tok.lower()
            tid = idx.vocab.setdefault(term, len(idx.vocab))
            tids[j] = tid
            counts[tid] = counts.get(tid, 0) + 1
        idx.token_ids.append(tids)
        lens.append(float(len(p.tokens)))
        for tid, tf in counts.items():
            while tid >= len(raw_postings):
                raw_postings.append({})
            raw_postings[tid][pos] = tf
    while len(raw_postings) < len(idx.vocab):
        raw_postings.append({})
    idx.doc_lens = np.asarray(lens, dtype=np.float64)
    idx.avg_len = float(idx.doc_lens.mean()) if lens else 0.0
    for per_term in raw_postings:
        positions = np.fromiter(per_term.keys(), dtype=np.intc, count=len(per_term))
        tfs = np.fromiter(
            (float(v) for v in per_term.values()), dtype=np.float64, count=len(per_term)
        )
        idx.postings.append((positions, tfs))
    return idx


def preprocess_question(question: str, subject: str, boost_weight: float = 1.0) -> CompoundQuery:
    """Tokenize and case-fold the question; boost the exact subject phrase."""
    bag = tuple(t.lower() for t in tokenize(question))
    phrases: tuple[tuple[str, ...], ...] = ()
    subject_tokens = tuple(t.lower() for t in tokenize(subject))
    if subject_tokens:
        phrases = (subject_tokens,)
    return CompoundQuery(bag_terms=bag, exact_phrases=phrases, boost_weight=boost_weight)


def _idf(n_passages: int, df: int) -> float:
    return math.log(1.0 + (n_passages - df + 0.5) / (df + 0.5))


def retrieve(idx: IndexedCorpus, q: CompoundQuery, k1_count: int) -> list[RetrievalHit]:
    """Score every passage and return the top k1_count hits (score > 0)."""
    q.validate()
    if k1_count < 0:
        raise ValueError("k1_count must be >= 0")
    if k1_count == 0 or idx.size == 0:
        return []
    scores = np.zeros(idx.size, dtype=np.float64)
    n = idx.size
    for term in q.bag_terms:
        tid = idx.vocab.get(term)
        if tid is None:
            continue
        positions, tfs = idx.postings[tid]
        if positions.shape[0] == 0:
            continue
        _kernels.bm25_accumulate(
            scores, positions, tfs, idx.doc_lens,
            _idf(n, positions.shape[0]), BM25_K1, BM25_B, idx.avg_len,
        )
    if q.boost_weight > 0:
        for phrase in q.exact_phrases:
            tids = [idx.vocab.get(t) for t in phrase]
            if any(t is None for t in tids):
                continue
            phrase_arr = np.asarray(tids, dtype=np.intc)
            # only passages containing the first phrase token can match
            candidates = idx.postings[tids[0]][0]
            for pos in candidates:
                if _kernels.phrase_occurs(idx.token_ids[pos], phrase_arr):
                    scores[pos] += q.boost_weight
    hit_positions = np.flatnonzero(scores > 0.0)
    hits = sorted(
        ((float(scores[pos]), idx.passage_ids[pos]) for pos in hit_positions),
        key=lambda t: (-t[0], t[1]),
    )
    return [RetrievalHit(passage_id=pid, ir_score=s) for s, pid in hits[:k1_count]]


def save_index(idx: IndexedCorpus, path: str) -> None:
    """Persist as versioned JSON; postings are rebuilt on load."""
    payload = {
        "format": INDEX_FORMAT,
        "version": INDEX_VERSION,
        "passages": [
            {
                "passage_id": p.passage_id,
                "doc_id": p.doc_id,
                "token_start": p.token_start,
                "token_end": p.token_end,
                "text": p.text,
            }
            for p in (idx.store[pid] for pid in idx.passage_ids)
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False, sort_keys=True)


def load_index(path: str) -> IndexedCorpus:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != INDEX_FORMAT:
        raise ValueError(f"{path}: not a {INDEX_FORMAT} file")
    if payload.get("version") != INDEX_VERSION:
        raise ValueError(f"{path}: unsupported index version {payload.get('version')}")
    passages = []
    for rec in payload["passages"]:
        tokens = tuple(tokenize(rec["text"]))
        passages.append(
            Passage(
                passage_id=rec["passage_id"],
                doc_id=rec["doc_id"],
                token_start=rec["token_start"],
                token_end=rec["token_end"],
                text=rec["text"],
                tokens=tokens,
            )
        )
    return build_index(passages)
