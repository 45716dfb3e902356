"""Relation-coherence re-ranking: check that a candidate passage supports the
subject as well as the object.

For a candidate answer, a reverse question is built by masking the subject in
the forward question and prepending the answer:

    "object : <answer text> , question : <masked question>"

A backward reader recovers the passage's subject span (P-subject). The
coherence score adds three parts: a retrained forward head over the answer
features, and one-hop / two-hop similarities comparing P-subject against the
mask slot and the original subject. Both similarities share one parameter set
and score sim(a, b) = net([a; b; a*b]). Span representations concatenate the
first and last token vectors; the object representation is unified across the
two encoding directions by a dedicated two-layer map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import Passage, tokenize, tokenize_with_offsets
from .readers import AnswerSpan, ReaderContract, ReaderError, TokenEncoding
from .rankers import (
    MLPGrads,
    MLPParams,
    RankedCandidate,
    featurize,
    init_mlp,
    mlp_apply,
    mlp_forward,
    mlp_grad,
    params_from_dict,
    params_to_dict,
    ranking_loss,
    _ranking_loss_grads,
    sgd_step,
    zero_mlp,
)

SUB_MASK = "<sub_mask>"
OBJECT_TAG = "object : "
QUESTION_SEP = " , question : "

# Similarity contribution when the backward reader finds no subject span.
NULL_SUBJECT_FLOOR = -1.0

COHERENCE_FORMAT = "tablefill-coherence"
COHERENCE_VERSION = 1

INTERROGATIVES = ("what", "who", "whom", "whose", "when", "where", "which")


@dataclass(frozen=True)
class ReverseQuestion:
    surface: str
    object_text: str
    masked_question: str
    sub_mask_pos: int

    def validate(self) -> None:
        if tokenize(self.masked_question).count(SUB_MASK) != 1:
            raise ValueError("masked question must contain the mask token exactly once")
        expected = OBJECT_TAG + self.object_text + QUESTION_SEP + self.masked_question
        if self.surface != expected:
            raise ValueError("reverse-question surface does not match its parts")


def find_token_span(haystack_tokens: list[str], needle_tokens: list[str]) -> int | None:
    """Index of the first case-insensitive contiguous match, or None."""
    if not needle_tokens:
        return None
    hs = [t.lower() for t in haystack_tokens]
    nd = [t.lower() for t in needle_tokens]
    for i in range(len(hs) - len(nd) + 1):
        if hs[i : i + len(nd)] == nd:
            return i
    return None


def make_reverse_question(forward_question: str, subject: str, answer_text: str) -> ReverseQuestion:
    """Mask the first occurrence of the subject and prepend the answer text."""
    if SUB_MASK in forward_question:
        raise ValueError("forward question already contains the mask token")
    if SUB_MASK in answer_text:
        raise ValueError("answer text contains the mask token")
    offsets = tokenize_with_offsets(forward_question)
    q_tokens = [t for t, _, _ in offsets]
    subject_tokens = tokenize(subject)
    at = find_token_span(q_tokens, subject_tokens)
    if at is None:
        raise ValueError(
            f"subject {subject!r} does not occur in question {forward_question!r}"
        )
    start_char = offsets[at][1]
    end_char = offsets[at + len(subject_tokens) - 1][2]
    masked = forward_question[:start_char] + SUB_MASK + forward_question[end_char:]
    surface = OBJECT_TAG + answer_text + QUESTION_SEP + masked
    sub_mask_pos = tokenize(surface).index(SUB_MASK)
    rq = ReverseQuestion(
        surface=surface,
        object_text=answer_text,
        masked_question=masked,
        sub_mask_pos=sub_mask_pos,
    )
    rq.validate()
    return rq


def parse_reverse_question(surface: str) -> tuple[str, str]:
    """Recover (object_text, masked_question); splits on the first separator."""
    if not surface.startswith(OBJECT_TAG):
        raise ValueError("surface does not start with the object tag")
    rest = surface[len(OBJECT_TAG):]
    if QUESTION_SEP not in rest:
        raise ValueError("surface lacks the question separator")
    object_text, masked = rest.split(QUESTION_SEP, 1)
    return object_text, masked


def span_vector(vectors: np.ndarray, start: int, end: int) -> np.ndarray:
    """[vectors[start]; vectors[end]] for an inclusive token span."""
    n = vectors.shape[0]
    if not (0 <= start <= end < n):
        raise ValueError(f"span ({start},{end}) out of range for {n} tokens")
    return np.concatenate([vectors[start], vectors[end]])


@dataclass
class CoherenceParams:
    """theta1 scores answer features; theta2 is shared by both similarities;
    theta_obj maps the two object representations to the unified one."""

    theta1: MLPParams
    theta2: MLPParams
    theta_obj: MLPParams
    dim: int

    def validate(self) -> None:
        d = self.dim
        self.theta1.validate()
        self.theta2.validate()
        self.theta_obj.validate()
        if self.theta1.d_in != 5 * d or self.theta1.d_out != 1:
            raise ValueError("theta1 must map 5d features to a scalar")
        if self.theta2.d_in != 12 * d or self.theta2.d_out != 1:
            raise ValueError("theta2 must map [a; b; a*b] over 4d vectors to a scalar")
        if self.theta_obj.d_in != 4 * d or self.theta_obj.d_out != 2 * d:
            raise ValueError("theta_obj must map 4d to 2d")


def init_coherence(d: int, d_hidden: int, seed: int, dropout_rate: float = 0.0) -> CoherenceParams:
    return CoherenceParams(
        theta1=init_mlp(5 * d, d_hidden, seed, d_out=1, dropout_rate=dropout_rate),
        theta2=init_mlp(12 * d, d_hidden, seed + 1, d_out=1, dropout_rate=dropout_rate),
        theta_obj=init_mlp(4 * d, d_hidden, seed + 2, d_out=2 * d, dropout_rate=dropout_rate),
        dim=d,
    )


def zero_coherence(d: int, d_hidden: int = 4) -> CoherenceParams:
    """Untrained scorer: every component is 0, so only the null-subject floor
    differentiates candidates. Deterministic stand-in when no trained
    parameters are supplied."""
    return CoherenceParams(
        theta1=zero_mlp(5 * d, d_hidden),
        theta2=zero_mlp(12 * d, d_hidden),
        theta_obj=zero_mlp(4 * d, d_hidden, d_out=2 * d),
        dim=d,
    )


def coherence_to_dict(params: CoherenceParams) -> dict:
    return {
        "format": COHERENCE_FORMAT,
        "version": COHERENCE_VERSION,
        "dim": params.dim,
        "theta1": params_to_dict(params.theta1),
        "theta2": params_to_dict(params.theta2),
        "theta_obj": params_to_dict(params.theta_obj),
    }


def coherence_from_dict(obj: dict) -> CoherenceParams:
    if obj.get("format") != COHERENCE_FORMAT:
        raise ValueError("not a coherence parameter blob")
    if obj.get("version") != COHERENCE_VERSION:
        raise ValueError(f"unsupported coherence version {obj.get('version')}")
    params = CoherenceParams(
        theta1=params_from_dict(obj["theta1"]),
        theta2=params_from_dict(obj["theta2"]),
        theta_obj=params_from_dict(obj["theta_obj"]),
        dim=int(obj["dim"]),
    )
    params.validate()
    return params


def save_coherence(params: CoherenceParams, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(coherence_to_dict(params), fh, sort_keys=True)


def load_coherence(path: str) -> CoherenceParams:
    with open(path, encoding="utf-8") as fh:
        return coherence_from_dict(json.load(fh))


def similarity(theta2: MLPParams, h_a: np.ndarray, h_b: np.ndarray) -> float:
    """sim(a, b) = net([a; b; a*b]) under the shared similarity parameters."""
    if h_a.shape != h_b.shape:
        raise ValueError(f"similarity inputs differ in shape: {h_a.shape} vs {h_b.shape}")
    return mlp_forward(theta2, np.concatenate([h_a, h_b, h_a * h_b]))


@dataclass(frozen=True)
class CoherenceInputs:
    """Everything coherence scoring needs for one candidate."""

    fwd_encoding: TokenEncoding
    bwd_encoding: TokenEncoding
    subject_span: tuple[int, int]  # into fwd question vectors
    object_span_fwd: tuple[int, int]  # into fwd passage vectors
    object_span_bwd: tuple[int, int]  # into bwd passage vectors
    sub_mask_pos: int  # into bwd question vectors
    p_subject_span: tuple[int, int] | None  # into bwd passage vectors; None = null
    answer_features: np.ndarray  # 5d vector


@dataclass(frozen=True)
class CoherenceBreakdown:
    forward_score: float
    one_hop: float
    two_hop: float

    @property
    def total(self) -> float:
        return self.forward_score + self.one_hop + self.two_hop


def _coherence_vectors(params: CoherenceParams, inputs: CoherenceInputs):
    """Shared geometry for scoring and gradients."""
    f_obj = span_vector(inputs.fwd_encoding.passage_vectors, *inputs.object_span_fwd)
    b_obj = span_vector(inputs.bwd_encoding.passage_vectors, *inputs.object_span_bwd)
    x_obj = np.concatenate([f_obj, b_obj])
    h_uni_obj = mlp_apply(params.theta_obj, x_obj)
    h_sub = np.concatenate(
        [h_uni_obj, span_vector(inputs.fwd_encoding.question_vectors, *inputs.subject_span)]
    )
    h_sub_mask = np.concatenate(
        [h_uni_obj,
         span_vector(inputs.bwd_encoding.question_vectors, inputs.sub_mask_pos, inputs.sub_mask_pos)]
    )
    h_p_sub = None
    if inputs.p_subject_span is not None:
        h_p_sub = np.concatenate(
            [h_uni_obj, span_vector(inputs.bwd_encoding.passage_vectors, *inputs.p_subject_span)]
        )
    return x_obj, h_uni_obj, h_sub, h_sub_mask, h_p_sub


def coherence_score(params: CoherenceParams, inputs: CoherenceInputs) -> CoherenceBreakdown:
    """Additive coherence score; a missing P-subject pins both similarity
    terms to the floor value."""
    forward = mlp_forward(params.theta1, inputs.answer_features)
    _, _, h_sub, h_sub_mask, h_p_sub = _coherence_vectors(params, inputs)
    if h_p_sub is None:
        return CoherenceBreakdown(forward, NULL_SUBJECT_FLOOR, NULL_SUBJECT_FLOOR)
    one_hop = similarity(params.theta2, h_p_sub, h_sub_mask)
    two_hop = similarity(params.theta2, h_p_sub, h_sub)
    return CoherenceBreakdown(forward, one_hop, two_hop)


@dataclass
class CoherenceGrads:
    theta1: MLPGrads
    theta2: MLPGrads | None
    theta_obj: MLPGrads | None


def _sim_grad(theta2: MLPParams, h_a: np.ndarray, h_b: np.ndarray, up: float):
    """Gradients of sim(a, b) wrt theta2 and both inputs."""
    k = h_a.shape[0]
    v = np.concatenate([h_a, h_b, h_a * h_b])
    g = mlp_grad(theta2, v, up)
    dv = g.x
    dh_a = dv[:k] + dv[2 * k :] * h_b
    dh_b = dv[k : 2 * k] + dv[2 * k :] * h_a
    return g, dh_a, dh_b


def coherence_score_grad(params: CoherenceParams, inputs: CoherenceInputs, upstream: float = 1.0):
    """(breakdown, grads) for the full scoring graph, dropout off.

    Encoder vectors are fixed inputs; gradients stop at them.
    """
    d2 = 2 * params.dim
    forward = mlp_forward(params.theta1, inputs.answer_features)
    g1 = mlp_grad(params.theta1, inputs.answer_features, upstream)
    x_obj, _, h_sub, h_sub_mask, h_p_sub = _coherence_vectors(params, inputs)
    if h_p_sub is None:
        return (
            CoherenceBreakdown(forward, NULL_SUBJECT_FLOOR, NULL_SUBJECT_FLOOR),
            CoherenceGrads(theta1=g1, theta2=None, theta_obj=None),
        )
    one_hop = similarity(params.theta2, h_p_sub, h_sub_mask)
    two_hop = similarity(params.theta2, h_p_sub, h_sub)
    g2_one, d_psub_one, d_mask_one = _sim_grad(params.theta2, h_p_sub, h_sub_mask, upstream)
    g2_two, d_psub_two, d_sub_two = _sim_grad(params.theta2, h_p_sub, h_sub, upstream)
    g2_one.add_(g2_two)
    # h_uni_obj occupies the first 2d entries of every similarity input
    du = (d_psub_one + d_psub_two + d_mask_one + d_sub_two)[:d2]
    g_obj = mlp_grad(params.theta_obj, x_obj, du)
    return (
        CoherenceBreakdown(forward, one_hop, two_hop),
        CoherenceGrads(theta1=g1, theta2=g2_one, theta_obj=g_obj),
    )


@dataclass(frozen=True)
class ScoredCandidate:
    candidate: RankedCandidate
    s_coher: float
    p_subject: AnswerSpan | None
    breakdown: CoherenceBreakdown


def build_coherence_inputs(
    reader: ReaderContract,
    question: str,
    subject: str,
    passage: Passage,
    answer: AnswerSpan,
) -> tuple[CoherenceInputs, AnswerSpan | None]:
    """Run the backward step and assemble scoring inputs for one candidate."""
    reverse = make_reverse_question(question, subject, answer.text)
    p_sub = reader.read_backward(reverse.surface, passage)
    p_sub.validate(len(passage.tokens))
    fwd_enc = reader.encode(question, passage)
    bwd_enc = reader.encode(reverse.surface, passage)
    q_tokens = tokenize(question)
    subject_tokens = tokenize(subject)
    at = find_token_span(q_tokens, subject_tokens)
    if at is None:
        raise ValueError(f"subject {subject!r} not in question {question!r}")
    subject_span = (at, at + len(subject_tokens) - 1)
    answer_span = (answer.start_tok, answer.end_tok)
    inputs = CoherenceInputs(
        fwd_encoding=fwd_enc,
        bwd_encoding=bwd_enc,
        subject_span=subject_span,
        object_span_fwd=answer_span,
        object_span_bwd=answer_span,
        sub_mask_pos=reverse.sub_mask_pos,
        p_subject_span=None if p_sub.is_null else (p_sub.start_tok, p_sub.end_tok),
        answer_features=featurize(fwd_enc, answer).h,
    )
    return inputs, (None if p_sub.is_null else p_sub)


def score_candidates(
    params: CoherenceParams,
    reader: ReaderContract,
    subject: str,
    question: str,
    candidates: list[RankedCandidate],
    store: dict[str, Passage],
    warnings: list[str] | None = None,
) -> list[ScoredCandidate]:
    """Attach coherence scores to ranked candidates, preserving order.

    A backward failure demotes only the failing candidate: it is scored with
    the null-subject floor and a warning is recorded.
    """
    out = []
    for cand in candidates:
        passage = store[cand.passage_id]
        try:
            inputs, p_sub = build_coherence_inputs(
                reader, question, subject, passage, cand.answer
            )
            breakdown = coherence_score(params, inputs)
        except (ReaderError, ValueError) as exc:
            if warnings is not None:
                warnings.append(f"backward step failed on {cand.passage_id}: {exc}")
            fwd_enc = reader.encode(question, passage)
            forward = mlp_forward(params.theta1, featurize(fwd_enc, cand.answer).h)
            breakdown = CoherenceBreakdown(forward, NULL_SUBJECT_FLOOR, NULL_SUBJECT_FLOOR)
            p_sub = None
        out.append(
            ScoredCandidate(
                candidate=cand,
                s_coher=breakdown.total,
                p_subject=p_sub,
                breakdown=breakdown,
            )
        )
    return out


@dataclass(frozen=True)
class BackwardExample:
    reverse_question: str
    passage_id: str
    p_subject_start: int
    p_subject_end: int


def invert_question(question: str, subject: str, object_text: str) -> list[str]:
    """Ungrammatical probes for mining subject spans: the answer text takes
    the interrogative adverb's slot and the subject's slot cycles through the
    adverbs. The forward reader answers such probes with the passage's
    subject, which the probes no longer mention."""
    offsets = tokenize_with_offsets(question)
    tokens = [t for t, _, _ in offsets]
    lower = [t.lower() for t in tokens]
    adv_at = next((i for i, t in enumerate(lower) if t in INTERROGATIVES), None)
    if adv_at is None:
        return []
    subject_tokens = tokenize(subject)
    sub_at = find_token_span(tokens, subject_tokens)
    if sub_at is None or sub_at <= adv_at < sub_at + len(subject_tokens):
        return []
    adv_span = (offsets[adv_at][1], offsets[adv_at][2])
    sub_span = (offsets[sub_at][1], offsets[sub_at + len(subject_tokens) - 1][2])
    probes = []
    for adverb in INTERROGATIVES:
        # replace right-to-left so char offsets stay valid
        spans = sorted(
            [(adv_span, object_text), (sub_span, adverb)], key=lambda t: -t[0][0]
        )
        text = question
        for (s, e), repl in spans:
            text = text[:s] + repl + text[e:]
        probes.append(text)
    return probes


def build_backward_training_data(
    reader: ReaderContract,
    rows: list[tuple[str, str, str]],
    passages: list[Passage],
    match_f1,
    f1_threshold: float = 0.7,
) -> tuple[list[BackwardExample], int]:
    """Synthesize backward-reader training data by question inversion.

    rows are (forward_question, subject, object_text) triples. For each row
    and passage, the inverted probes are read by the forward reader; the first
    answer fuzzy-matching the subject (token F1 >= threshold) labels that span
    as the P-subject. Returns (examples, skipped_row_passage_pairs).
    """
    examples = []
    skipped = 0
    for question, subject, object_text in rows:
        probes = invert_question(question, subject, object_text)
        reverse = make_reverse_question(question, subject, object_text)
        for passage in passages:
            matched = None
            for probe in probes:
                span = reader.read(probe, passage)
                if span.is_null:
                    continue
                if match_f1(span.text, subject) >= f1_threshold:
                    matched = span
                    break
            if matched is None:
                skipped += 1
                continue
            examples.append(
                BackwardExample(
                    reverse_question=reverse.surface,
                    passage_id=passage.passage_id,
                    p_subject_start=matched.start_tok,
                    p_subject_end=matched.end_tok,
                )
            )
    return examples, skipped


def save_backward_examples(examples: list[BackwardExample], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(
                json.dumps(
                    {
                        "reverse_question": ex.reverse_question,
                        "passage_id": ex.passage_id,
                        "p_subject": [ex.p_subject_start, ex.p_subject_end],
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


@dataclass(frozen=True)
class CoherenceExample:
    """One candidate of a training question, with its scoring inputs."""

    inputs: CoherenceInputs
    label: bool  # True = positive


@dataclass
class CoherenceTrainResult:
    params: CoherenceParams
    loss_trace: list[float] = field(default_factory=list)
    dropped_questions: int = 0


def select_training_candidates(
    ranked: list[CoherenceExample], m: int
) -> list[CoherenceExample] | None:
    """Top-m candidates, extended past m until both labels appear; None when
    the question stays one-sided."""
    chosen = list(ranked[:m])
    rest = ranked[m:]
    for extra in rest:
        have_pos = any(c.label for c in chosen)
        have_neg = any(not c.label for c in chosen)
        if have_pos and have_neg:
            break
        if extra.label and not have_pos:
            chosen.append(extra)
        elif not extra.label and not have_neg:
            chosen.append(extra)
    if not any(c.label for c in chosen) or not any(not c.label for c in chosen):
        return None
    return chosen


def train_coherence(
    params: CoherenceParams,
    questions: list[list[CoherenceExample]],
    m: int,
    epochs: int,
    lr: float,
    seed: int,
) -> CoherenceTrainResult:
    """Joint gradient descent on theta1, theta2 and theta_obj.

    Per question, candidates come ordered by the upstream pipeline; the top-m
    window (extended until both labels are present) feeds the same
    cross-entropy as the answer ranker, over coherence scores. Dropout is off;
    the full scoring graph is differentiated exactly.
    """
    del seed  # iteration order is the input order; no randomness needed
    params = CoherenceParams(
        theta1=params.theta1.copy(),
        theta2=params.theta2.copy(),
        theta_obj=params.theta_obj.copy(),
        dim=params.dim,
    )
    params.validate()
    usable: list[list[CoherenceExample]] = []
    dropped = 0
    for ranked in questions:
        chosen = select_training_candidates(ranked, m)
        if chosen is None:
            dropped += 1
        else:
            usable.append(chosen)
    trace: list[float] = []
    for _ in range(epochs):
        epoch_losses = []
        for chosen in usable:
            scores = []
            grads = []
            for ex in chosen:
                breakdown, g = coherence_score_grad(params, ex.inputs, upstream=1.0)
                scores.append(breakdown.total)
                grads.append(g)
            scores_arr = np.asarray(scores)
            labels = np.array([ex.label for ex in chosen])
            pos_scores = scores_arr[labels]
            neg_scores = scores_arr[~labels]
            epoch_losses.append(ranking_loss(pos_scores, neg_scores))
            d_pos, d_neg = _ranking_loss_grads(pos_scores, neg_scores)
            d_all = np.empty(len(chosen))
            d_all[labels] = d_pos
            d_all[~labels] = d_neg
            total1 = total2 = total_obj = None
            for g, up in zip(grads, d_all):
                t1 = _scale_grads(g.theta1, up)
                total1 = t1 if total1 is None else _add(total1, t1)
                if g.theta2 is not None:
                    t2 = _scale_grads(g.theta2, up)
                    total2 = t2 if total2 is None else _add(total2, t2)
                if g.theta_obj is not None:
                    to = _scale_grads(g.theta_obj, up)
                    total_obj = to if total_obj is None else _add(total_obj, to)
            sgd_step(params.theta1, total1, lr)
            if total2 is not None:
                sgd_step(params.theta2, total2, lr)
            if total_obj is not None:
                sgd_step(params.theta_obj, total_obj, lr)
        trace.append(float(np.mean(epoch_losses)) if epoch_losses else 0.0)
    return CoherenceTrainResult(params=params, loss_trace=trace, dropped_questions=dropped)


def _scale_grads(g: MLPGrads, factor: float) -> MLPGrads:
    return MLPGrads(w1=g.w1 * factor, b1=g.b1 * factor, w2=g.w2 * factor,
                    b2=g.b2 * factor, x=g.x * factor)


def _add(a: MLPGrads, b: MLPGrads) -> MLPGrads:
    a.add_(b)
    return a
