"""Coherence tests. The flattened central-difference checker here is the
oracle for the joint scoring-graph gradients."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_passage
from tablefill.coherence import (
    CoherenceExample,
    CoherenceInputs,
    CoherenceParams,
    NULL_SUBJECT_FLOOR,
    build_backward_training_data,
    build_coherence_inputs,
    coherence_from_dict,
    coherence_score,
    coherence_score_grad,
    coherence_to_dict,
    init_coherence,
    invert_question,
    make_reverse_question,
    parse_reverse_question,
    score_candidates,
    select_training_candidates,
    similarity,
    span_vector,
    train_coherence,
)
from tablefill.rankers import MLPParams, RankedCandidate, init_mlp, mlp_forward, zero_mlp
from tablefill.readers import AnswerSpan, StubReader, TokenEncoding
from tablefill.supervision import fuzzy_f1
from worlds import decoy_text, fact_text


class TestReverseQuestion:
    def test_capital_city_example(self):
        rq = make_reverse_question(
            "What's the capital city of USA?", "USA", "Washington, D.C."
        )
        assert rq.surface == (
            "object : Washington, D.C. , question : "
            "What's the capital city of <sub_mask>?"
        )
        assert rq.masked_question == "What's the capital city of <sub_mask>?"
        assert rq.object_text == "Washington, D.C."

    def test_first_occurrence_masked(self):
        rq = make_reverse_question("Did Paris name Paris square?", "Paris", "yes")
        assert rq.masked_question == "Did <sub_mask> name Paris square?"

    def test_missing_subject_error_names_both(self):
        with pytest.raises(ValueError) as exc:
            make_reverse_question("Where is Berlin?", "Tokyo", "x")
        assert "Tokyo" in str(exc.value)
        assert "Berlin" in str(exc.value)

    def test_case_insensitive_match(self):
        rq = make_reverse_question("where is USA located?", "usa", "here")
        assert rq.masked_question == "where is <sub_mask> located?"

    def test_mask_position_in_surface_tokens(self):
        rq = make_reverse_question("What city is Globex from ?", "Globex", "Boston Heights")
        from tablefill.corpus import tokenize

        assert tokenize(rq.surface)[rq.sub_mask_pos] == "<sub_mask>"

    @given(
        subject=st.sampled_from(["Ada", "Grand Forks", "Wayne Manor"]),
        obj=st.text(
            alphabet=st.characters(whitelist_categories=("Lu", "Ll", "Nd"), max_codepoint=0x7F),
            min_size=1,
            max_size=12,
        ),
        prefix=st.sampled_from(["Where is", "Who runs", "What made"]),
    )
    def test_roundtrip(self, subject, obj, prefix):
        question = f"{prefix} {subject} today ?"
        rq = make_reverse_question(question, subject, obj)
        object_text, masked = parse_reverse_question(rq.surface)
        assert object_text == rq.object_text
        assert masked == rq.masked_question
        assert masked.count("<sub_mask>") == 1


class TestSpanVector:
    def test_single_token_doubles(self):
        vecs = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_allclose(span_vector(vecs, 1, 1), [3, 4, 3, 4])

    def test_start_end_concatenation(self):
        vecs = np.array([[1.0, 2.0], [0.0, 0.0], [0.0, 0.0], [3.0, 4.0]])
        np.testing.assert_allclose(span_vector(vecs, 0, 3), [1, 2, 3, 4])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            span_vector(np.zeros((2, 2)), 0, 2)


class TestSimilarity:
    def test_zero_params_give_bias(self):
        theta2 = zero_mlp(12, 4, b2=0.25)
        h = np.ones(4)
        assert similarity(theta2, h, h) == pytest.approx(0.25)

    def test_hand_forward_pass(self):
        # v = [1]*12, w1 = 0.1 everywhere: z = [1.2, 1.2]; relu keeps both
        # w2 = [1, -0.5]: out = 1.2 - 0.6 + 0.25 = 0.85
        theta2 = MLPParams(
            w1=np.full((12, 2), 0.1),
            b1=np.zeros(2),
            w2=np.array([[1.0], [-0.5]]),
            b2=np.array([0.25]),
            dropout_rate=0.0,
        )
        h = np.ones(4)
        assert similarity(theta2, h, h) == pytest.approx(0.85)

    def test_deterministic(self):
        theta2 = init_mlp(12, 8, seed=3)
        a = np.arange(4.0)
        b = np.arange(4.0) * -0.5
        assert similarity(theta2, a, b) == similarity(theta2, a, b)

    def test_dim_mismatch(self):
        theta2 = init_mlp(12, 8, seed=3)
        with pytest.raises(ValueError):
            similarity(theta2, np.ones(4), np.ones(6))


def random_inputs(d=4, seed=0, null_subject=False):
    rng = np.random.default_rng(seed)

    def enc(nq, np_):
        return TokenEncoding(
            question_vectors=rng.normal(size=(nq, d)),
            passage_vectors=rng.normal(size=(np_, d)),
            cls_vector=rng.normal(size=d),
            d=d,
        )

    return CoherenceInputs(
        fwd_encoding=enc(6, 9),
        bwd_encoding=enc(8, 9),
        subject_span=(1, 2),
        object_span_fwd=(4, 5),
        object_span_bwd=(4, 5),
        sub_mask_pos=3,
        p_subject_span=None if null_subject else (0, 1),
        answer_features=rng.normal(size=5 * d),
    )


class TestCoherenceScore:
    def test_additive_composition(self):
        params = init_coherence(d=4, d_hidden=6, seed=1)
        inputs = random_inputs(seed=2)
        breakdown = coherence_score(params, inputs)
        # recompute each component independently from the same geometry
        from tablefill.coherence import _coherence_vectors

        _, _, h_sub, h_sub_mask, h_p_sub = _coherence_vectors(params, inputs)
        fwd = mlp_forward(params.theta1, inputs.answer_features)
        one = similarity(params.theta2, h_p_sub, h_sub_mask)
        two = similarity(params.theta2, h_p_sub, h_sub)
        assert breakdown.forward_score == pytest.approx(fwd)
        assert breakdown.one_hop == pytest.approx(one)
        assert breakdown.two_hop == pytest.approx(two)
        assert breakdown.total == pytest.approx(fwd + one + two)

    def test_null_subject_floor(self):
        params = init_coherence(d=4, d_hidden=6, seed=1)
        params.theta1 = zero_mlp(20, 6, b2=0.4)
        breakdown = coherence_score(params, random_inputs(seed=3, null_subject=True))
        assert breakdown.one_hop == NULL_SUBJECT_FLOOR
        assert breakdown.two_hop == NULL_SUBJECT_FLOOR
        assert breakdown.total == pytest.approx(0.4 - 2.0)

    def test_all_zero_params(self):
        params = CoherenceParams(
            theta1=zero_mlp(20, 4),
            theta2=zero_mlp(48, 4),
            theta_obj=zero_mlp(16, 4, d_out=8),
            dim=4,
        )
        assert coherence_score(params, random_inputs(seed=4)).total == pytest.approx(0.0)

    def test_shared_theta2_mutation_affects_both_hops(self):
        params = init_coherence(d=4, d_hidden=6, seed=5)
        inputs = random_inputs(seed=6)
        before = coherence_score(params, inputs)
        params.theta2.b2 += 1.0  # one parameter object serves both terms
        after = coherence_score(params, inputs)
        assert after.one_hop == pytest.approx(before.one_hop + 1.0)
        assert after.two_hop == pytest.approx(before.two_hop + 1.0)


def _flatten_params(params: CoherenceParams):
    arrays = []
    for theta in (params.theta1, params.theta2, params.theta_obj):
        arrays.extend([theta.w1, theta.b1, theta.w2, theta.b2])
    return arrays


def _flatten_grads(g):
    arrays = []
    for part in (g.theta1, g.theta2, g.theta_obj):
        arrays.extend([part.w1, part.b1, part.w2, part.b2])
    return arrays


class TestCoherenceGradients:
    def test_matches_central_differences(self):
        eps = 1e-5
        for attempt in range(20):
            params = init_coherence(d=4, d_hidden=5, seed=100 + attempt)
            for theta in (params.theta1, params.theta2, params.theta_obj):
                theta.w1 *= 5.0
                theta.b1 *= 5.0
            inputs = random_inputs(seed=200 + attempt)
            breakdown, grads = coherence_score_grad(params, inputs)
            # conditioning guard: relu kinks break the finite-difference oracle
            probe = _probe_preactivations(params, inputs)
            if min(abs(v) for v in probe) < 1e-3:
                continue
            analytic = _flatten_grads(grads)
            numeric = []
            for arr in _flatten_params(params):
                g = np.zeros_like(arr)
                it = np.nditer(arr, flags=["multi_index"])
                while not it.finished:
                    i = it.multi_index
                    old = arr[i]
                    arr[i] = old + eps
                    hi = coherence_score(params, inputs).total
                    arr[i] = old - eps
                    lo = coherence_score(params, inputs).total
                    arr[i] = old
                    g[i] = (hi - lo) / (2 * eps)
                    it.iternext()
                numeric.append(g)
            for a, n in zip(analytic, numeric):
                denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
                assert float(np.max(np.abs(a - n) / denom)) < 1e-4
            return
        raise AssertionError("no well-conditioned instance found")

    def test_null_subject_grads_only_theta1(self):
        params = init_coherence(d=4, d_hidden=5, seed=1)
        _, grads = coherence_score_grad(params, random_inputs(seed=2, null_subject=True))
        assert grads.theta2 is None
        assert grads.theta_obj is None
        assert np.any(grads.theta1.w1)


def _probe_preactivations(params, inputs):
    from tablefill.coherence import _coherence_vectors

    x_obj, _, h_sub, h_sub_mask, h_p_sub = _coherence_vectors(params, inputs)
    zs = []
    zs.extend(inputs.answer_features @ params.theta1.w1 + params.theta1.b1)
    zs.extend(x_obj @ params.theta_obj.w1 + params.theta_obj.b1)
    for h_b in (h_sub_mask, h_sub):
        v = np.concatenate([h_p_sub, h_b, h_p_sub * h_b])
        zs.extend(v @ params.theta2.w1 + params.theta2.b1)
    return zs


class TestScoreCandidates:
    def _candidate(self, reader, question, passage):
        answer = reader.read(question, passage)
        return RankedCandidate(
            question=question, passage_id=passage.passage_id, answer=answer, s_openqa=0.0
        )

    def test_subject_recovered_for_fact_passage(self):
        reader = StubReader(seed=0, d=8)
        question = "What city is Globex from ?"
        passage = make_passage("pf", fact_text("Globex", "Boston Heights"))
        cand = self._candidate(reader, question, passage)
        assert cand.answer.text == "Boston Heights"
        params = init_coherence(d=8, d_hidden=4, seed=2)
        (scored,) = score_candidates(
            params, reader, "Globex", question, [cand], {"pf": passage}
        )
        assert scored.p_subject is not None
        assert scored.p_subject.text == "Globex"
        assert scored.breakdown.one_hop != NULL_SUBJECT_FLOOR

    def test_subjectless_passage_hits_floor(self):
        reader = StubReader(seed=0, d=8)
        question = "What city is Globex from ?"
        passage = make_passage("pd", decoy_text("Evil Twin Cove"))
        cand = self._candidate(reader, question, passage)
        assert cand.answer.text == "Evil Twin Cove"
        params = init_coherence(d=8, d_hidden=4, seed=2)
        warnings = []
        (scored,) = score_candidates(
            params, reader, "Globex", question, [cand], {"pd": passage}, warnings
        )
        assert scored.p_subject is None
        assert scored.breakdown.one_hop == NULL_SUBJECT_FLOOR
        assert scored.breakdown.two_hop == NULL_SUBJECT_FLOOR

    def test_empty_candidates(self):
        params = init_coherence(d=8, d_hidden=4, seed=2)
        assert score_candidates(params, StubReader(d=8), "S", "What city is S from ?", [], {}) == []

    def test_order_preserved(self):
        reader = StubReader(seed=0, d=8)
        question = "What city is Globex from ?"
        p1 = make_passage("p1", fact_text("Globex", "Boston Heights"))
        p2 = make_passage("p2", decoy_text("Evil Twin Cove"))
        cands = [self._candidate(reader, question, p) for p in (p2, p1)]
        params = init_coherence(d=8, d_hidden=4, seed=2)
        scored = score_candidates(
            params, reader, "Globex", question, cands, {"p1": p1, "p2": p2}
        )
        assert [s.candidate.passage_id for s in scored] == ["p2", "p1"]


class TestInvertQuestion:
    def test_matches_published_probe_strings(self):
        probes = invert_question(
            "What organization did John Smith work for?", "John Smith", "IBM"
        )
        assert probes[0] == "IBM organization did what work for?"
        assert probes[1] == "IBM organization did who work for?"
        assert len(probes) == 7

    def test_no_interrogative_no_probes(self):
        assert invert_question("Name the city of Globex .", "Globex", "X") == []


class TestBuildBackwardData:
    def test_planted_subject_recovered(self):
        reader = StubReader(seed=0, d=8)
        question = "What organization did John Smith work for?"
        passage = make_passage("pk", "John Smith was at IBM .")
        examples, skipped = build_backward_training_data(
            reader, [(question, "John Smith", "IBM")], [passage], fuzzy_f1
        )
        assert skipped == 0
        (ex,) = examples
        assert ex.passage_id == "pk"
        assert passage.tokens[ex.p_subject_start : ex.p_subject_end + 1] == ("John", "Smith")
        assert ex.reverse_question == (
            "object : IBM , question : What organization did <sub_mask> work for?"
        )

    def test_subjectless_passage_skipped(self):
        reader = StubReader(seed=0, d=8)
        question = "What organization did John Smith work for?"
        passage = make_passage("pk", "the company was at IBM .")
        examples, skipped = build_backward_training_data(
            reader, [(question, "John Smith", "IBM")], [passage], fuzzy_f1
        )
        assert examples == []
        assert skipped == 1

    def test_fuzzy_keep_with_noisy_span(self):
        reader = StubReader(seed=0, d=8)
        question = "What organization did John Smith work for?"
        passage = make_passage("pk", "John Smith worked at IBM .")
        examples, _ = build_backward_training_data(
            reader, [(question, "John Smith", "IBM")], [passage], fuzzy_f1
        )
        (ex,) = examples
        # the noisy run includes the verb but clears the 0.7 bar
        assert ex.p_subject_start == 0


def synthetic_coherence_questions(n_questions, d, seed):
    """Separable fixture: positives carry matching P-subject geometry
    (identical span vectors), negatives a mismatched one."""
    rng = np.random.default_rng(seed)
    questions = []
    for _ in range(n_questions):
        candidates = []
        for label in (True, False, False, False):
            sub_vec = rng.normal(size=d)
            sub_vec /= np.linalg.norm(sub_vec)
            other = rng.normal(size=d)
            other /= np.linalg.norm(other)
            q_vecs = rng.normal(size=(5, d))
            q_vecs[1] = sub_vec
            q_vecs[2] = sub_vec
            p_vecs = rng.normal(size=(6, d))
            p_vecs[0] = sub_vec if label else other
            p_vecs[1] = sub_vec if label else other
            bq_vecs = rng.normal(size=(7, d))
            inputs = CoherenceInputs(
                fwd_encoding=TokenEncoding(q_vecs, p_vecs, rng.normal(size=d), d),
                bwd_encoding=TokenEncoding(bq_vecs, p_vecs, rng.normal(size=d), d),
                subject_span=(1, 2),
                object_span_fwd=(4, 5),
                object_span_bwd=(4, 5),
                sub_mask_pos=3,
                p_subject_span=(0, 1),
                answer_features=rng.normal(size=5 * d),
            )
            candidates.append(CoherenceExample(inputs=inputs, label=label))
        questions.append(candidates)
    return questions


class TestSelectTrainingCandidates:
    def _ex(self, label):
        return CoherenceExample(inputs=random_inputs(), label=label)

    def test_window_kept_when_balanced(self):
        ranked = [self._ex(True), self._ex(False), self._ex(False)]
        chosen = select_training_candidates(ranked, m=2)
        assert len(chosen) == 2

    def test_extends_past_m_for_missing_label(self):
        ranked = [self._ex(False)] * 3 + [self._ex(True)]
        chosen = select_training_candidates(ranked, m=2)
        assert any(c.label for c in chosen)
        assert len(chosen) == 3

    def test_one_sided_dropped(self):
        ranked = [self._ex(False)] * 4
        assert select_training_candidates(ranked, m=2) is None


class TestTrainCoherence:
    def test_separable_fixture_trains(self):
        d = 4
        questions = synthetic_coherence_questions(30, d, seed=8)
        params = init_coherence(d=d, d_hidden=8, seed=9)
        result = train_coherence(params, questions, m=7, epochs=40, lr=0.05, seed=0)
        assert result.loss_trace[-1] < result.loss_trace[0]
        wins = 0
        for candidates in questions:
            scores = [
                coherence_score(result.params, c.inputs).total for c in candidates
            ]
            labels = [c.label for c in candidates]
            best = max(range(len(scores)), key=lambda i: scores[i])
            wins += labels[best]
        assert wins / len(questions) >= 0.95

    def test_one_sided_questions_dropped(self):
        d = 4
        questions = synthetic_coherence_questions(4, d, seed=8)
        one_sided = [[c for c in questions[0] if not c.label]]
        result = train_coherence(
            init_coherence(d=d, d_hidden=4, seed=1), one_sided, m=7, epochs=1, lr=0.1, seed=0
        )
        assert result.dropped_questions == 1


class TestCoherencePersistence:
    def test_roundtrip(self):
        params = init_coherence(d=4, d_hidden=6, seed=3)
        again = coherence_from_dict(coherence_to_dict(params))
        np.testing.assert_array_equal(params.theta2.w1, again.theta2.w1)
        assert again.dim == 4
