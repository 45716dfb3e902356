"""Extraction metrics (exact match, token F1), per-table aggregation,
training-set samplers, and the staged throughput benchmark.

Answers are normalized before comparison: lowercase, strip punctuation
(Unicode category P), drop the articles a/an/the, split on whitespace. EM
compares normalized token lists; F1 uses multiset precision/recall.
"""

from __future__ import annotations

import statistics
import time
import unicodedata
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .extractor import FilledCell, PartialTable, TableRow

_ARTICLES = frozenset({"a", "an", "the"})


def _strip_punct(s: str) -> str:
    return "".join(c for c in s if not unicodedata.category(c).startswith("P"))


def normalize_answer(s: str) -> list[str]:
    """Lowercase, remove punctuation, drop articles; returns the token list."""
    tokens = _strip_punct(s.lower()).split()
    return [t for t in tokens if t not in _ARTICLES]


def exact_match(pred: str, gold: str) -> int:
    return 1 if normalize_answer(pred) == normalize_answer(gold) else 0


def token_f1(pred: str, gold: str) -> float:
    """Multiset token overlap F1 over normalized tokens.

    Both sides empty counts as a perfect match (keeps EM=1 implying F1=1);
    exactly one side empty, or no overlap, scores 0.
    """
    p_tokens = normalize_answer(pred)
    g_tokens = normalize_answer(gold)
    if not p_tokens and not g_tokens:
        return 1.0
    if not p_tokens or not g_tokens:
        return 0.0
    overlap = sum((Counter(p_tokens) & Counter(g_tokens)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(p_tokens)
    recall = overlap / len(g_tokens)
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class QuestionScore:
    subject: str
    predicted: str
    gold: str
    em: int
    f1: float


@dataclass(frozen=True)
class EvalResult:
    relationship_id: str
    per_question: tuple[QuestionScore, ...]
    em: float  # aggregated, 0-100
    f1: float  # aggregated, 0-100

    def to_dict(self) -> dict:
        return {
            "relationship_id": self.relationship_id,
            "em": self.em,
            "f1": self.f1,
            "per_question": [
                {
                    "subject": q.subject,
                    "predicted": q.predicted,
                    "gold": q.gold,
                    "em": q.em,
                    "f1": q.f1,
                }
                for q in self.per_question
            ],
        }


def evaluate(filled: list[FilledCell], table: PartialTable) -> EvalResult:
    """Score filled cells against the table's ground-truth objects.

    Empty and failed cells score 0; aggregates are unweighted means over the
    table's questions, reported on a 0-100 scale.
    """
    if len(filled) != len(table.rows):
        raise ValueError(
            f"cell count {len(filled)} != row count {len(table.rows)} "
            f"for relationship {table.relationship_id!r}"
        )
    scores = []
    for cell, row in zip(filled, table.rows):
        if row.object is None:
            raise ValueError(f"row {row.subject!r} lacks a ground-truth object")
        if cell.status != "filled":
            scores.append(QuestionScore(row.subject, "", row.object, 0, 0.0))
            continue
        scores.append(
            QuestionScore(
                subject=row.subject,
                predicted=cell.answer_text,
                gold=row.object,
                em=exact_match(cell.answer_text, row.object),
                f1=token_f1(cell.answer_text, row.object),
            )
        )
    n = len(scores)
    em_agg = 100.0 * sum(q.em for q in scores) / n if n else 0.0
    f1_agg = 100.0 * sum(q.f1 for q in scores) / n if n else 0.0
    return EvalResult(
        relationship_id=table.relationship_id,
        per_question=tuple(scores),
        em=em_agg,
        f1=f1_agg,
    )


@dataclass(frozen=True)
class SamplerSpec:
    mode: str  # "changing_rows" | "changing_relationships"
    fraction: float | None = None
    relationship_count: int | None = None
    rows_per_relation: int | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.mode == "changing_rows":
            if self.fraction is None or not (0.0 < self.fraction <= 1.0):
                raise ValueError("changing_rows needs fraction in (0, 1]")
        elif self.mode == "changing_relationships":
            if self.relationship_count is None or self.relationship_count < 1:
                raise ValueError("changing_relationships needs relationship_count >= 1")
            if self.rows_per_relation is None or self.rows_per_relation < 1:
                raise ValueError("changing_relationships needs rows_per_relation >= 1")
        else:
            raise ValueError(f"unknown sampler mode {self.mode!r}")


def _subset_rows(table: PartialTable, keep: list[int]) -> PartialTable:
    return PartialTable(
        relationship_id=table.relationship_id,
        key_attribute=table.key_attribute,
        question_template=table.question_template,
        rows=tuple(table.rows[i] for i in sorted(keep)),
    )


def sample_training(tables: list[PartialTable], spec: SamplerSpec) -> list[PartialTable]:
    """Deterministic training subsampling.

    changing_rows keeps floor(fraction * rows) of every relationship;
    changing_relationships keeps a fixed number of rows from a random subset
    of relationships. Errors when changing_rows would select nothing at all.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    if spec.mode == "changing_rows":
        out = []
        total = 0
        for table in tables:
            k = int(spec.fraction * len(table.rows))
            total += k
            if k == 0:
                continue
            keep = rng.choice(len(table.rows), size=k, replace=False).tolist()
            out.append(_subset_rows(table, keep))
        if total == 0:
            raise ValueError(
                f"fraction {spec.fraction} selects zero rows from every relationship"
            )
        return out
    count = min(spec.relationship_count, len(tables))
    chosen = sorted(rng.choice(len(tables), size=count, replace=False).tolist())
    out = []
    for ti in chosen:
        table = tables[ti]
        k = min(spec.rows_per_relation, len(table.rows))
        keep = rng.choice(len(table.rows), size=k, replace=False).tolist()
        out.append(_subset_rows(table, keep))
    return out


# Cumulative benchmark stages, in funnel order: retrieval only, plus the
# reader, plus the answer network, plus coherence and final selection.
BENCH_STAGES = ("ir", "ir_reader", "answer_ranker", "full")

_STAGE_PREFIX = {
    "ir": ("ir",),
    "ir_reader": ("ir", "reader"),
    "answer_ranker": ("ir", "reader", "answer_ranker"),
    "full": ("ir", "reader", "answer_ranker", "coherence", "select"),
}


def bench_throughput(table: PartialTable, pipeline, repeats: int = 3) -> dict:
    """Questions/second per cumulative funnel stage, medians over repeats.

    pipeline is a callable(table) -> (cells, timing_report) as produced by the
    extractor; the timing report's per-stage seconds feed the cumulative view.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    per_stage_qps: dict[str, list[float]] = {s: [] for s in BENCH_STAGES}
    per_stage_lat: dict[str, list[float]] = {s: [] for s in BENCH_STAGES}
    n = len(table.rows)
    for _ in range(repeats):
        _, report = pipeline(table)
        seconds = report["seconds"]
        for stage in BENCH_STAGES:
            cumulative = sum(seconds[s] for s in _STAGE_PREFIX[stage])
            if cumulative <= 0:
                cumulative = 1e-9
            per_stage_qps[stage].append(n / cumulative)
            per_stage_lat[stage].append(1000.0 * cumulative / max(n, 1))
    out = {}
    for stage in BENCH_STAGES:
        qps = per_stage_qps[stage]
        out[stage] = {
            "qps": statistics.median(qps),
            "median_latency_ms": statistics.median(per_stage_lat[stage]),
            "qps_spread": max(qps) - min(qps),
            "repeats": repeats,
        }
    return out


def wall_time(fn, *args, **kwargs):
    t0 = time.perf_counter()
    result = fn(*args, **kwargs)
    return result, time.perf_counter() - t0
