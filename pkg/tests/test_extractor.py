import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_passage
from tablefill import cli
from tablefill.coherence import (
    CoherenceBreakdown,
    ScoredCandidate,
    init_coherence,
    train_coherence,
)
from tablefill.evalkit import evaluate
from tablefill.extractor import (
    FilledCell,
    PartialTable,
    RowOutcome,
    TableRow,
    cell_from_dict,
    cell_to_dict,
    fill_table,
    fill_table_baseline,
    select_final,
    table_from_dict,
    zscore_normalize,
)
from tablefill.rankers import PipelineConfig, RankedCandidate, zero_mlp
from tablefill.readers import AnswerSpan
from worlds import build_base_world, build_decoy_world


class TestZScore:
    def test_hand_computed(self):
        # mean 2, population std sqrt(2/3)
        out = zscore_normalize([1.0, 2.0, 3.0])
        assert out[0] == pytest.approx(-1.2247, abs=1e-4)
        assert out[1] == pytest.approx(0.0, abs=1e-12)
        assert out[2] == pytest.approx(1.2247, abs=1e-4)

    def test_zero_variance(self):
        assert zscore_normalize([5.0, 5.0, 5.0]) == [0.0, 0.0, 0.0]

    def test_single_element(self):
        assert zscore_normalize([42.0]) == [0.0]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            zscore_normalize([])

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=40))
    def test_pool_statistics(self, values):
        out = np.asarray(zscore_normalize(values))
        if np.std(values) >= 1e-12:
            assert abs(out.mean()) < 1e-9
            assert abs(out.std() - 1.0) < 1e-9


def _scored(pid, s_openqa, s_coher, question="q ?"):
    answer = AnswerSpan.make(pid, 0, 0, "tok", 1.0, 0.0)
    return ScoredCandidate(
        candidate=RankedCandidate(
            question=question, passage_id=pid, answer=answer, s_openqa=s_openqa
        ),
        s_coher=s_coher,
        p_subject=None,
        breakdown=CoherenceBreakdown(s_coher, 0.0, 0.0),
    )


def _store(pids):
    return {pid: make_passage(pid, "tok and more words", doc_id=f"doc-{pid}") for pid in pids}


class TestSelectFinal:
    def test_constant_expert_defers_to_other(self):
        outcomes = [
            RowOutcome(
                row=TableRow("s1"),
                candidates=[_scored("pa", 1.0, 0.9), _scored("pb", 1.0, 0.1)],
            )
        ]
        cells = select_final(outcomes, True, _store(["pa", "pb"]))
        assert cells[0].passage_id == "pa"

    def test_two_rows_hand_computed(self):
        # openqa pool [1,2,3,4]: mean 2.5, std sqrt(1.25)
        # coherence pool [0,1,5,2]: mean 2, std sqrt(3.5)
        outcomes = [
            RowOutcome(
                row=TableRow("s1"),
                candidates=[_scored("a1", 1.0, 0.0), _scored("a2", 2.0, 1.0)],
            ),
            RowOutcome(
                row=TableRow("s2"),
                candidates=[_scored("b1", 3.0, 5.0), _scored("b2", 4.0, 2.0)],
            ),
        ]
        cells = select_final(outcomes, True, _store(["a1", "a2", "b1", "b2"]))
        # hand: z_open = (x-2.5)/1.118034, z_coh = (x-2)/1.870829
        # a1 = -1.3416 + -1.0690 = -2.4107; a2 = -0.4472 + -0.5345 = -0.9817
        # b1 = 0.4472 + 1.6036 = 2.0508;   b2 = 1.3416 + 0.0 = 1.3416
        assert cells[0].passage_id == "a2"
        assert cells[1].passage_id == "b1"
        z_open = (3.0 - 2.5) / math.sqrt(1.25)
        z_coh = (5.0 - 2.0) / math.sqrt(3.5)
        assert cells[1].s_final == pytest.approx(z_open + z_coh, abs=1e-9)

    def test_no_candidates_row_marked_empty(self):
        outcomes = [RowOutcome(row=TableRow("s1"), candidates=[])]
        cells = select_final(outcomes, True, {})
        assert cells[0].status == "empty"
        assert cells[0].reason == "no-candidates"

    def test_alternatives_sorted_by_final(self):
        outcomes = [
            RowOutcome(
                row=TableRow("s1"),
                candidates=[_scored("pa", 0.0, 0.1), _scored("pb", 1.0, 0.9)],
            ),
            RowOutcome(row=TableRow("s2"), candidates=[_scored("pc", 0.5, 0.5)]),
        ]
        cells = select_final(outcomes, True, _store(["pa", "pb", "pc"]))
        finals = [a.s_final for a in cells[0].alternatives]
        assert finals == sorted(finals, reverse=True)

    @given(st.data())
    def test_affine_invariance(self, data):
        n_rows = data.draw(st.integers(1, 4))
        outcomes = []
        pids = []
        k = 0
        for i in range(n_rows):
            cands = []
            for _ in range(data.draw(st.integers(1, 4))):
                pid = f"p{k:02d}"
                k += 1
                pids.append(pid)
                cands.append(
                    _scored(
                        pid,
                        data.draw(st.floats(-5, 5, allow_nan=False)),
                        data.draw(st.floats(-5, 5, allow_nan=False)),
                    )
                )
            outcomes.append(RowOutcome(row=TableRow(f"s{i}"), candidates=cands))
        a = data.draw(st.floats(0.1, 10))
        b = data.draw(st.floats(-20, 20))
        store = _store(pids)
        baseline = [c.passage_id for c in select_final(outcomes, True, store)]
        rescaled = [
            RowOutcome(
                row=o.row,
                candidates=[
                    _scored(c.candidate.passage_id, a * c.candidate.s_openqa + b, c.s_coher)
                    for c in o.candidates
                ],
            )
            for o in outcomes
        ]
        assert [c.passage_id for c in select_final(rescaled, True, store)] == baseline


@pytest.fixture(scope="module")
def base_world():
    return build_base_world()


@pytest.fixture(scope="module")
def decoy_world():
    return build_decoy_world()


@pytest.fixture(scope="module")
def trained_coherence(decoy_world):
    w = decoy_world
    cfg = PipelineConfig()
    ranker = zero_mlp(5 * 16, 1)
    questions = cli._collect_coherence_questions(
        [w.train_table], w.idx, w.reader, ranker, cfg, 0.7
    )
    result = train_coherence(
        init_coherence(16, 16, seed=0), questions, m=7, epochs=60, lr=0.05, seed=0
    )
    return result.params


class TestFillTable:
    def test_planted_world_all_correct(self, base_world):
        w = base_world
        cells, report = fill_table(
            w.table, w.idx, w.reader, zero_mlp(5 * 16, 1),
            init_coherence(16, 8, seed=0), PipelineConfig(),
        )
        assert evaluate(cells, w.table).em == 100.0
        assert set(report["seconds"]) == {"ir", "reader", "answer_ranker", "coherence", "select"}

    def test_empty_table(self, base_world):
        w = base_world
        empty = PartialTable(
            relationship_id="none", key_attribute="k",
            question_template="What city is <subject> from ?", rows=(),
        )
        cells, report = fill_table(
            empty, w.idx, w.reader, zero_mlp(5 * 16, 1),
            init_coherence(16, 8, seed=0), PipelineConfig(),
        )
        assert cells == []
        assert report["rows"] == 0

    def test_funnel_counts_never_increase(self, decoy_world):
        w = decoy_world
        _, report = fill_table(
            w.table, w.idx, w.reader, zero_mlp(5 * 16, 1),
            init_coherence(16, 8, seed=0), PipelineConfig(),
        )
        for counts in report["row_cardinalities"]:
            assert counts["ir"] >= counts["reader"] >= counts["answer_ranker"] >= counts["final"]

    def test_provenance_resolves(self, base_world):
        w = base_world
        cells, _ = fill_table(
            w.table, w.idx, w.reader, zero_mlp(5 * 16, 1),
            init_coherence(16, 8, seed=0), PipelineConfig(),
        )
        for cell in cells:
            passage = w.idx.store[cell.passage_id]
            assert passage.doc_id == cell.doc_id
            assert cell.answer_text in " ".join(passage.tokens)

    def test_jobs_parallel_same_cells(self, base_world):
        w = base_world
        args = (w.idx, w.reader, zero_mlp(5 * 16, 1), init_coherence(16, 8, seed=0), PipelineConfig())
        serial, _ = fill_table(w.table, *args, jobs=1)
        parallel, _ = fill_table(w.table, *args, jobs=4)
        assert serial == parallel


class TestDecoyFlip:
    def test_baseline_picks_decoy(self, decoy_world):
        w = decoy_world
        cells, _ = fill_table_baseline(
            w.table, w.idx, w.reader, zero_mlp(5 * 16, 1), PipelineConfig()
        )
        assert cells[0].doc_id == w.decoy_doc_id
        assert cells[0].answer_text == "Evil Twin Cove"

    def test_trained_coherence_flips_to_fact(self, decoy_world, trained_coherence):
        w = decoy_world
        cells, _ = fill_table(
            w.table, w.idx, w.reader, zero_mlp(5 * 16, 1), trained_coherence, PipelineConfig()
        )
        assert evaluate(cells, w.table).em == 100.0
        assert cells[0].doc_id == "m-fact-00"

    def test_baseline_matches_full_without_decoys(self, base_world):
        w = base_world
        ranker = zero_mlp(5 * 16, 1)
        base_cells, _ = fill_table_baseline(w.table, w.idx, w.reader, ranker, PipelineConfig())
        full_cells, _ = fill_table(
            w.table, w.idx, w.reader, ranker, init_coherence(16, 8, seed=0), PipelineConfig()
        )
        assert [c.answer_text for c in base_cells] == [c.answer_text for c in full_cells]
        assert [c.passage_id for c in base_cells] == [c.passage_id for c in full_cells]


class TestTableParsing:
    def test_template_needs_single_slot(self):
        with pytest.raises(ValueError):
            PartialTable(
                relationship_id="r", key_attribute="k",
                question_template="Where is <subject> or <subject> ?",
                rows=(TableRow("s"),),
            ).validate()

    def test_from_dict(self):
        table = table_from_dict(
            {
                "relationship_id": "r",
                "key_attribute": "k",
                "question_template": "Where is <subject> ?",
                "rows": [{"subject": "s", "object": None}, {"subject": "t", "object": "o"}],
            }
        )
        assert table.rows[1].object == "o"

    def test_cell_dict_roundtrip(self):
        cell = FilledCell(
            subject="s", answer_text="a", passage_id="p", doc_id="d",
            s_openqa_raw=0.1, s_coher_raw=0.2, s_final=0.3, alternatives=(),
        )
        assert cell_from_dict(cell_to_dict(cell)) == cell
