"""Distant supervision: label retrieved passages by fuzzy-matching reader
answers against the known object.

A passage is positive when the token F1 between the reader's answer and the
ground-truth object reaches the threshold (0.7 by default); otherwise
negative. Null answers carry no span to train on and are left out of the
negative pool.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .evalkit import normalize_answer, token_f1
from .extractor import PartialTable
from .index import IndexedCorpus, preprocess_question, retrieve
from .rankers import PipelineConfig, rank_passages
from .readers import AnswerSpan, ReaderContract


@dataclass(frozen=True)
class SupervisionConfig:
    retrieve_k: int = 150
    f1_threshold: float = 0.7
    min_pos: int = 1
    n_neg: int = 5
    boost_weight: float = 1.0

    def validate(self) -> None:
        if not (0.0 < self.f1_threshold <= 1.0):
            raise ValueError(f"f1_threshold {self.f1_threshold} outside (0, 1]")
        if self.retrieve_k < 1 or self.min_pos < 1 or self.n_neg < 1:
            raise ValueError("retrieve_k, min_pos and n_neg must be >= 1")


@dataclass(frozen=True)
class LabeledPassage:
    question: str
    passage_id: str
    answer: AnswerSpan
    label: str  # "positive" | "negative"
    match_f1: float


@dataclass(frozen=True)
class TrainingRow:
    question: str
    subject: str
    object: str
    relationship_id: str
    positives: tuple[LabeledPassage, ...]
    negatives: tuple[LabeledPassage, ...]


def fuzzy_f1(predicted: str, gold: str) -> float:
    """Token F1 after answer normalization; 0 when either side normalizes to
    empty."""
    if not normalize_answer(predicted) or not normalize_answer(gold):
        return 0.0
    return token_f1(predicted, gold)


def label_passages(
    question: str,
    answers: list[AnswerSpan],
    gold_object: str,
    threshold: float,
) -> list[LabeledPassage]:
    """Pure labeling of reader outputs; null answers are dropped."""
    out = []
    for span in answers:
        if span.is_null:
            continue
        f1 = fuzzy_f1(span.text, gold_object)
        out.append(
            LabeledPassage(
                question=question,
                passage_id=span.passage_id,
                answer=span,
                label="positive" if f1 >= threshold else "negative",
                match_f1=f1,
            )
        )
    return out


@dataclass
class SupervisionResult:
    rows: list[TrainingRow] = field(default_factory=list)
    skipped: int = 0


def build_training_set(
    tables: list[PartialTable],
    idx: IndexedCorpus,
    reader: ReaderContract,
    cfg: SupervisionConfig,
) -> SupervisionResult:
    """Expand each row's question, retrieve, read, and label.

    Rows lacking min_pos positives or n_neg negatives are skipped (counted).
    Exactly n_neg negatives are kept, chosen by ascending passage_id for
    reproducibility; all positives are kept.
    """
    cfg.validate()
    result = SupervisionResult()
    for table in tables:
        for row in table.rows:
            if row.object is None:
                result.skipped += 1
                continue
            question = table.question_for(row)
            query = preprocess_question(question, row.subject, boost_weight=cfg.boost_weight)
            hits = retrieve(idx, query, cfg.retrieve_k)
            ranked = rank_passages(reader, question, hits, len(hits), idx.store)
            labeled = label_passages(
                question, [a for _, a in ranked], row.object, cfg.f1_threshold
            )
            positives = tuple(lp for lp in labeled if lp.label == "positive")
            negatives = sorted(
                (lp for lp in labeled if lp.label == "negative"),
                key=lambda lp: lp.passage_id,
            )
            if len(positives) < cfg.min_pos or len(negatives) < cfg.n_neg:
                result.skipped += 1
                continue
            result.rows.append(
                TrainingRow(
                    question=question,
                    subject=row.subject,
                    object=row.object,
                    relationship_id=table.relationship_id,
                    positives=positives,
                    negatives=tuple(negatives[: cfg.n_neg]),
                )
            )
    return result


def write_training_jsonl(rows: list[TrainingRow], path: str) -> None:
    def span_rec(lp: LabeledPassage) -> dict:
        return {
            "passage_id": lp.passage_id,
            "start": lp.answer.start_tok,
            "end": lp.answer.end_tok,
        }

    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(
                json.dumps(
                    {
                        "question": row.question,
                        "positives": [span_rec(lp) for lp in row.positives],
                        "negatives": [span_rec(lp) for lp in row.negatives],
                    },
                    ensure_ascii=False,
                    sort_keys=True,
                )
                + "\n"
            )


def read_training_jsonl(path: str) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
