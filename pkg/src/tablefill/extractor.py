"""Per-table orchestration: run the funnel for every row, normalize expert
scores across the whole relationship, and pick one answer per row.

The two experts (answer-network score and coherence score) live on different
scales, so each is z-scored over all candidates of all rows sharing the
relationship before summing. Zero-variance pools normalize to all zeros,
which makes a constant expert drop out of the decision.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .coherence import CoherenceParams, ScoredCandidate, CoherenceBreakdown, score_candidates
from .index import IndexedCorpus, preprocess_question, retrieve
from .rankers import MLPParams, PipelineConfig, RankedCandidate, answer_rank, rank_passages
from .readers import ReaderContract

STAGES = ("ir", "reader", "answer_ranker", "coherence", "select")


@dataclass(frozen=True)
class TableRow:
    subject: str
    object: str | None = None


@dataclass(frozen=True)
class PartialTable:
    relationship_id: str
    key_attribute: str
    question_template: str
    rows: tuple[TableRow, ...]

    def validate(self, require_subject_slot: bool = True) -> None:
        count = self.question_template.count("<subject>")
        if require_subject_slot and count != 1:
            raise ValueError(
                f"template must contain '<subject>' exactly once, found {count}"
            )
        if count == 1:
            for row in self.rows:
                if not row.subject:
                    raise ValueError("rows must have non-empty subjects")

    def question_for(self, row: TableRow) -> str:
        if "<subject>" in self.question_template:
            return self.question_template.replace("<subject>", row.subject, 1)
        return self.question_template


def table_from_dict(obj: dict) -> PartialTable:
    table = PartialTable(
        relationship_id=obj["relationship_id"],
        key_attribute=obj["key_attribute"],
        question_template=obj["question_template"],
        rows=tuple(
            TableRow(subject=r["subject"], object=r.get("object"))
            for r in obj["rows"]
        ),
    )
    table.validate(require_subject_slot="<subject>" in obj["question_template"])
    return table


def load_tables(path: str) -> list[PartialTable]:
    """Load one table object or a list of them from a JSON file."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if isinstance(payload, dict):
        payload = [payload]
    return [table_from_dict(obj) for obj in payload]


def zscore_normalize(values: list[float]) -> list[float]:
    """(v - mean) / population std; all zeros when the variance vanishes."""
    if not values:
        raise ValueError("cannot normalize an empty list")
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std())
    if std < 1e-12:
        return [0.0] * len(values)
    return [float((v - mean) / std) for v in arr]


@dataclass(frozen=True)
class Alternative:
    passage_id: str
    doc_id: str
    answer_text: str
    start_tok: int
    end_tok: int
    s_openqa_raw: float
    s_coher_raw: float
    s_final: float


@dataclass(frozen=True)
class FilledCell:
    subject: str
    answer_text: str
    passage_id: str | None
    doc_id: str | None
    s_openqa_raw: float
    s_coher_raw: float
    s_final: float
    alternatives: tuple[Alternative, ...]
    status: str = "filled"  # filled | empty | failed
    reason: str | None = None

    @classmethod
    def unfilled(cls, subject: str, status: str, reason: str) -> "FilledCell":
        return cls(
            subject=subject, answer_text="", passage_id=None, doc_id=None,
            s_openqa_raw=0.0, s_coher_raw=0.0, s_final=0.0, alternatives=(),
            status=status, reason=reason,
        )


def cell_to_dict(cell: FilledCell) -> dict:
    return {
        "subject": cell.subject,
        "answer_text": cell.answer_text,
        "passage_id": cell.passage_id,
        "doc_id": cell.doc_id,
        "s_openqa_raw": cell.s_openqa_raw,
        "s_coher_raw": cell.s_coher_raw,
        "s_final": cell.s_final,
        "status": cell.status,
        "reason": cell.reason,
        "alternatives": [
            {
                "passage_id": a.passage_id,
                "doc_id": a.doc_id,
                "answer_text": a.answer_text,
                "start_tok": a.start_tok,
                "end_tok": a.end_tok,
                "s_openqa_raw": a.s_openqa_raw,
                "s_coher_raw": a.s_coher_raw,
                "s_final": a.s_final,
            }
            for a in cell.alternatives
        ],
    }


def cell_from_dict(obj: dict) -> FilledCell:
    return FilledCell(
        subject=obj["subject"],
        answer_text=obj["answer_text"],
        passage_id=obj.get("passage_id"),
        doc_id=obj.get("doc_id"),
        s_openqa_raw=float(obj.get("s_openqa_raw", 0.0)),
        s_coher_raw=float(obj.get("s_coher_raw", 0.0)),
        s_final=float(obj.get("s_final", 0.0)),
        alternatives=tuple(
            Alternative(
                passage_id=a["passage_id"],
                doc_id=a["doc_id"],
                answer_text=a["answer_text"],
                start_tok=a["start_tok"],
                end_tok=a["end_tok"],
                s_openqa_raw=a["s_openqa_raw"],
                s_coher_raw=a["s_coher_raw"],
                s_final=a["s_final"],
            )
            for a in obj.get("alternatives", [])
        ),
        status=obj.get("status", "filled"),
        reason=obj.get("reason"),
    )


@dataclass
class StageTimings:
    seconds: dict[str, float] = field(default_factory=lambda: {s: 0.0 for s in STAGES})
    row_counts: list[dict[str, int]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._lock = threading.Lock()

    def add(self, stage: str, dt: float) -> None:
        with self._lock:
            self.seconds[stage] += dt

    def report(self, n_rows: int) -> dict:
        qps = {}
        for stage in STAGES:
            t = self.seconds[stage]
            qps[stage] = (n_rows / t) if t > 0 else None
        return {
            "rows": n_rows,
            "seconds": dict(self.seconds),
            "questions_per_second": qps,
            "row_cardinalities": self.row_counts,
            "warnings": list(self.warnings),
        }


@dataclass
class RowOutcome:
    row: TableRow
    candidates: list[ScoredCandidate] = field(default_factory=list)
    failure: str | None = None
    counts: dict[str, int] = field(default_factory=dict)


def run_row(
    table: PartialTable,
    row: TableRow,
    idx: IndexedCorpus,
    reader: ReaderContract,
    ranker_params: MLPParams,
    coherence_params: CoherenceParams | None,
    cfg: PipelineConfig,
    timings: StageTimings | None = None,
) -> RowOutcome:
    """Run the funnel stages for one row; coherence is skipped when its
    parameters are None (raw coherence scores are then 0)."""
    outcome = RowOutcome(row=row)
    question = table.question_for(row)
    t0 = time.perf_counter()
    query = preprocess_question(question, row.subject, boost_weight=cfg.boost_weight)
    hits = retrieve(idx, query, cfg.k1)
    t1 = time.perf_counter()
    ranked_passages = rank_passages(reader, question, hits, cfg.k2, idx.store)
    t2 = time.perf_counter()
    with_encodings = [
        (p, a, reader.encode(question, p)) for p, a in ranked_passages if not a.is_null
    ]
    ranked = answer_rank(ranker_params, question, with_encodings, cfg.k3)
    t3 = time.perf_counter()
    if coherence_params is not None:
        warnings: list[str] = []
        scored = score_candidates(
            coherence_params, reader, row.subject, question, ranked, idx.store, warnings
        )
        if timings is not None:
            timings.warnings.extend(warnings)
    else:
        scored = [
            ScoredCandidate(
                candidate=c, s_coher=0.0, p_subject=None,
                breakdown=CoherenceBreakdown(0.0, 0.0, 0.0),
            )
            for c in ranked
        ]
    t4 = time.perf_counter()
    outcome.candidates = scored
    outcome.counts = {
        "ir": len(hits),
        "reader": len(ranked_passages),
        "answer_ranker": len(ranked),
        "final": min(1, len(scored)),
    }
    if timings is not None:
        timings.add("ir", t1 - t0)
        timings.add("reader", t2 - t1)
        timings.add("answer_ranker", t3 - t2)
        timings.add("coherence", t4 - t3)
        timings.row_counts.append(outcome.counts)
    return outcome


# Final scores are compared at this resolution: differences below it are
# float noise (z-scores are O(1)) and fall to the passage_id tie-break, which
# keeps the argmax stable under numerically equivalent rescalings.
_SCORE_RESOLUTION = 9


def select_final(outcomes: list[RowOutcome], use_coherence: bool, store) -> list[FilledCell]:
    """Pool every candidate of every row, z-score each expert, pick per-row
    argmax of the summed normalized scores (ties by passage_id)."""
    pool: list[tuple[int, int, ScoredCandidate]] = []
    for i, outcome in enumerate(outcomes):
        for j, cand in enumerate(outcome.candidates):
            pool.append((i, j, cand))
    finals: dict[tuple[int, int], float] = {}
    if pool:
        if use_coherence:
            openqa_z = zscore_normalize([c.candidate.s_openqa for _, _, c in pool])
            coher_z = zscore_normalize([c.s_coher for _, _, c in pool])
            for (i, j, _), zo, zc in zip(pool, openqa_z, coher_z):
                finals[(i, j)] = zo + zc
        else:
            # baseline mode: the answer-network score alone decides
            for i, j, cand in pool:
                finals[(i, j)] = cand.candidate.s_openqa
    cells = []
    for i, outcome in enumerate(outcomes):
        if outcome.failure is not None:
            cells.append(FilledCell.unfilled(outcome.row.subject, "failed", outcome.failure))
            continue
        if not outcome.candidates:
            cells.append(FilledCell.unfilled(outcome.row.subject, "empty", "no-candidates"))
            continue
        scored = sorted(
            (
                (finals[(i, j)], cand)
                for j, cand in enumerate(outcome.candidates)
            ),
            key=lambda t: (-round(t[0], _SCORE_RESOLUTION), t[1].candidate.passage_id),
        )
        alternatives = tuple(
            Alternative(
                passage_id=c.candidate.passage_id,
                doc_id=store[c.candidate.passage_id].doc_id,
                answer_text=c.candidate.answer.text,
                start_tok=c.candidate.answer.start_tok,
                end_tok=c.candidate.answer.end_tok,
                s_openqa_raw=c.candidate.s_openqa,
                s_coher_raw=c.s_coher,
                s_final=s,
            )
            for s, c in scored
        )
        best_score, best = scored[0]
        cells.append(
            FilledCell(
                subject=outcome.row.subject,
                answer_text=best.candidate.answer.text,
                passage_id=best.candidate.passage_id,
                doc_id=store[best.candidate.passage_id].doc_id,
                s_openqa_raw=best.candidate.s_openqa,
                s_coher_raw=best.s_coher,
                s_final=best_score,
                alternatives=alternatives,
            )
        )
    return cells


def fill_table(
    table: PartialTable,
    idx: IndexedCorpus,
    reader: ReaderContract,
    ranker_params: MLPParams,
    coherence_params: CoherenceParams | None,
    cfg: PipelineConfig,
    jobs: int = 1,
) -> tuple[list[FilledCell], dict]:
    """Fill every row of the table; returns (cells, timing report).

    Row failures are isolated as failed cells; the final selection is a
    barrier over the whole table.
    """
    cfg.validate()
    table.validate(require_subject_slot="<subject>" in table.question_template)
    timings = StageTimings()
    use_coherence = coherence_params is not None

    def process(row: TableRow) -> RowOutcome:
        try:
            return run_row(
                table, row, idx, reader, ranker_params, coherence_params, cfg, timings
            )
        except Exception as exc:  # noqa: BLE001 - row isolation is the contract
            outcome = RowOutcome(row=row)
            outcome.failure = f"failed: {exc}"
            return outcome

    if jobs > 1 and len(table.rows) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(process, table.rows))
    else:
        outcomes = [process(row) for row in table.rows]

    t0 = time.perf_counter()
    cells = select_final(outcomes, use_coherence, idx.store)
    timings.add("select", time.perf_counter() - t0)
    return cells, timings.report(len(table.rows))


def fill_table_baseline(
    table: PartialTable,
    idx: IndexedCorpus,
    reader: ReaderContract,
    ranker_params: MLPParams,
    cfg: PipelineConfig,
    jobs: int = 1,
) -> tuple[list[FilledCell], dict]:
    """Funnel without the coherence stage: K3 = 1 and the final score is the
    answer-network score alone."""
    baseline_cfg = PipelineConfig(
        k1=cfg.k1, k2=cfg.k2, k3=1, m=cfg.m,
        n_pos=cfg.n_pos, n_neg=cfg.n_neg, boost_weight=cfg.boost_weight,
    )
    return fill_table(
        table, idx, reader, ranker_params, None, baseline_cfg, jobs=jobs
    )


def write_cells_jsonl(cells: list[FilledCell], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cell in cells:
            fh.write(json.dumps(cell_to_dict(cell), ensure_ascii=False, sort_keys=True) + "\n")
