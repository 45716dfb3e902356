"""Passage ranking by margin score, answer ranking by a small MLP, and the
shared numeric kernel with hand-written gradients.

The scoring network is a two-layer perceptron

    out = w2.T @ dropout(relu(w1.T @ x + b1)) + b2

applied in inference mode (no dropout) for scoring. Training minimizes, per
question, the cross-entropy of each positive against all negatives:

    loss = -(1/N+) * sum_i log( exp(s_i+) / (exp(s_i+) + sum_j exp(s_j-)) )

optimized by plain gradient descent with a fixed learning rate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import Passage
from .index import IndexedCorpus, RetrievalHit
from .readers import AnswerSpan, ReaderContract, ReaderError, TokenEncoding

PARAMS_FORMAT = "tablefill-mlp"
PARAMS_VERSION = 1


@dataclass
class MLPParams:
    """w1: (d_in, d_hidden); b1: (d_hidden,); w2: (d_hidden, d_out); b2: (d_out,).

    Scalar-scoring heads use d_out == 1; the unified-object map uses a wider
    output layer.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    dropout_rate: float = 0.1

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def d_out(self) -> int:
        return self.w2.shape[1]

    def validate(self) -> None:
        if self.w1.shape != (self.d_in, self.d_hidden):
            raise ValueError("w1 shape inconsistent")
        if self.b1.shape != (self.d_hidden,):
            raise ValueError(f"b1 shape {self.b1.shape} != ({self.d_hidden},)")
        if self.w2.shape != (self.d_hidden, self.d_out):
            raise ValueError("w2 shape inconsistent")
        if self.b2.shape != (self.d_out,):
            raise ValueError(f"b2 shape {self.b2.shape} != ({self.d_out},)")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError(f"dropout_rate {self.dropout_rate} outside [0, 1)")
        for name, arr in (("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")

    def copy(self) -> "MLPParams":
        return MLPParams(
            w1=self.w1.copy(), b1=self.b1.copy(), w2=self.w2.copy(), b2=self.b2.copy(),
            dropout_rate=self.dropout_rate,
        )


def init_mlp(d_in: int, d_hidden: int, seed: int, d_out: int = 1,
             dropout_rate: float = 0.1, scale: float = 0.1) -> MLPParams:
    """Uniform(-scale, scale) initialization from a seeded generator."""
    rng = np.random.default_rng(seed)
    return MLPParams(
        w1=rng.uniform(-scale, scale, size=(d_in, d_hidden)),
        b1=rng.uniform(-scale, scale, size=d_hidden),
        w2=rng.uniform(-scale, scale, size=(d_hidden, d_out)),
        b2=rng.uniform(-scale, scale, size=d_out),
        dropout_rate=dropout_rate,
    )


def zero_mlp(d_in: int, d_hidden: int, d_out: int = 1, b2: float = 0.0) -> MLPParams:
    params = MLPParams(
        w1=np.zeros((d_in, d_hidden)),
        b1=np.zeros(d_hidden),
        w2=np.zeros((d_hidden, d_out)),
        b2=np.full(d_out, float(b2)),
        dropout_rate=0.0,
    )
    return params


def _dropout_mask(params: MLPParams, rng: np.random.Generator | None) -> np.ndarray | None:
    if params.dropout_rate == 0.0:
        return None
    if rng is None:
        raise ValueError("train-mode forward with dropout needs an rng")
    keep = rng.random(params.d_hidden) >= params.dropout_rate
    return keep.astype(np.float64) / (1.0 - params.dropout_rate)


def mlp_apply(params: MLPParams, x: np.ndarray, train_mode: bool = False,
              rng: np.random.Generator | None = None) -> np.ndarray:
    """Forward pass returning the (d_out,) output vector.

    Inference mode applies no dropout; train mode uses inverted dropout (kept
    units scaled by 1/(1-p)), deterministic given the generator state.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.d_in,):
        raise ValueError(f"input shape {x.shape} != ({params.d_in},)")
    a = np.maximum(x @ params.w1 + params.b1, 0.0)
    if train_mode:
        mask = _dropout_mask(params, rng)
        if mask is not None:
            a = a * mask
    return a @ params.w2 + params.b2


def mlp_forward(params: MLPParams, x: np.ndarray, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> float:
    """Scalar forward pass (requires d_out == 1)."""
    if params.d_out != 1:
        raise ValueError(f"mlp_forward needs d_out == 1, got {params.d_out}")
    return float(mlp_apply(params, x, train_mode=train_mode, rng=rng)[0])


@dataclass
class MLPGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    x: np.ndarray

    def add_(self, other: "MLPGrads") -> None:
        self.w1 += other.w1
        self.b1 += other.b1
        self.w2 += other.w2
        self.b2 += other.b2


def mlp_grad(params: MLPParams, x: np.ndarray, upstream, mask: np.ndarray | None = None) -> MLPGrads:
    """Gradients of the forward pass for an upstream cotangent.

    upstream is a scalar for d_out == 1 heads or a (d_out,) vector. With mask
    given, differentiates the train-mode pass that used that dropout mask;
    otherwise the inference pass (the finite-difference reference).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.d_in,):
        raise ValueError(f"input shape {x.shape} != ({params.d_in},)")
    up = np.atleast_1d(np.asarray(upstream, dtype=np.float64))
    if up.shape != (params.d_out,):
        raise ValueError(f"upstream shape {up.shape} != ({params.d_out},)")
    z = x @ params.w1 + params.b1
    a = np.maximum(z, 0.0)
    if mask is not None:
        a = a * mask
    dw2 = np.outer(a, up)
    db2 = up.copy()
    da = params.w2 @ up
    if mask is not None:
        da = da * mask
    dz = da * (z > 0.0)
    dw1 = np.outer(x, dz)
    db1 = dz
    dx = params.w1 @ dz
    return MLPGrads(w1=dw1, b1=db1, w2=dw2, b2=db2, x=dx)


def sgd_step(params: MLPParams, grads: MLPGrads, lr: float) -> None:
    params.w1 -= lr * grads.w1
    params.b1 -= lr * grads.b1
    params.w2 -= lr * grads.w2
    params.b2 -= lr * grads.b2


def params_to_dict(params: MLPParams) -> dict:
    return {
        "format": PARAMS_FORMAT,
        "version": PARAMS_VERSION,
        "d_in": params.d_in,
        "d_hidden": params.d_hidden,
        "d_out": params.d_out,
        "w1": params.w1.tolist(),
        "b1": params.b1.tolist(),
        "w2": params.w2.tolist(),
        "b2": params.b2.tolist(),
        "dropout_rate": params.dropout_rate,
    }


def params_from_dict(obj: dict) -> MLPParams:
    if obj.get("format") != PARAMS_FORMAT:
        raise ValueError("not a scoring-network parameter blob")
    if obj.get("version") != PARAMS_VERSION:
        raise ValueError(f"unsupported parameter version {obj.get('version')}")
    params = MLPParams(
        w1=np.asarray(obj["w1"], dtype=np.float64).reshape(obj["d_in"], obj["d_hidden"]),
        b1=np.asarray(obj["b1"], dtype=np.float64),
        w2=np.asarray(obj["w2"], dtype=np.float64).reshape(obj["d_hidden"], obj["d_out"]),
        b2=np.atleast_1d(np.asarray(obj["b2"], dtype=np.float64)),
        dropout_rate=float(obj["dropout_rate"]),
    )
    params.validate()
    return params


def save_params(params: MLPParams, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params_to_dict(params), fh, sort_keys=True)


def load_params(path: str) -> MLPParams:
    with open(path, encoding="utf-8") as fh:
        return params_from_dict(json.load(fh))


@dataclass(frozen=True)
class PipelineConfig:
    """Funnel fan-in/fan-out: K1 IR hits, K2 read passages, K3 final candidates."""

    k1: int = 30
    k2: int = 30
    k3: int = 5
    m: int = 7  # passages per question for coherence training
    n_pos: int = 1
    n_neg: int = 5
    boost_weight: float = 1.0

    def validate(self) -> None:
        if not (1 <= self.k3 <= self.k2 <= self.k1):
            raise ValueError(f"need K3 <= K2 <= K1, got {self.k3}/{self.k2}/{self.k1}")
        if self.m < 2:
            raise ValueError(f"M must be >= 2, got {self.m}")
        if self.n_pos < 1 or self.n_neg < 1:
            raise ValueError("n_pos and n_neg must be >= 1")


@dataclass(frozen=True)
class AnswerFeatures:
    """h = [h_best; h_null; h_q], a 5d vector for encoder dimension d."""

    h_best: np.ndarray
    h_null: np.ndarray
    h_q: np.ndarray
    h: np.ndarray


@dataclass(frozen=True)
class RankedCandidate:
    question: str
    passage_id: str
    answer: AnswerSpan
    s_openqa: float


def rank_passages(
    reader: ReaderContract,
    question: str,
    hits: list[RetrievalHit],
    k2: int,
    store: dict[str, Passage],
) -> list[tuple[Passage, AnswerSpan]]:
    """Read every hit and keep the top-k2 by margin score (s_best - s_null).

    Null answers are retained and ranked by their margins; ties break by
    passage_id ascending.
    """
    items = []
    for hit in hits:
        passage = store.get(hit.passage_id)
        if passage is None:
            raise KeyError(f"hit references unknown passage {hit.passage_id!r}")
        items.append((question, passage))
    try:
        spans = reader.read_batch(items)
    except ReaderError as exc:
        ids = [p.passage_id for _, p in items]
        raise ReaderError(f"reader failed on passages {ids}: {exc}") from exc
    for (_, passage), span in zip(items, spans):
        span.validate(len(passage.tokens))
    scored = sorted(
        zip((p for _, p in items), spans),
        key=lambda t: (-t[1].s_margin, t[0].passage_id),
    )
    return scored[: max(k2, 0)]


def featurize(encoding: TokenEncoding, answer: AnswerSpan) -> AnswerFeatures:
    """Build the answer-distance feature vector from token encodings.

    h_best concatenates the span's start and end token vectors, h_null doubles
    the cls vector, h_q averages the question token vectors.
    """
    if answer.is_null:
        raise ValueError(f"cannot featurize a null answer ({answer.passage_id})")
    n = encoding.passage_vectors.shape[0]
    if not (0 <= answer.start_tok <= answer.end_tok < n):
        raise ValueError(
            f"span ({answer.start_tok},{answer.end_tok}) out of range for passage "
            f"{answer.passage_id!r} of {n} tokens"
        )
    if encoding.question_vectors.shape[0] == 0:
        raise ValueError("cannot featurize with an empty question encoding")
    h_best = np.concatenate(
        [encoding.passage_vectors[answer.start_tok], encoding.passage_vectors[answer.end_tok]]
    )
    h_null = np.concatenate([encoding.cls_vector, encoding.cls_vector])
    h_q = encoding.question_vectors.mean(axis=0)
    return AnswerFeatures(h_best=h_best, h_null=h_null, h_q=h_q,
                          h=np.concatenate([h_best, h_null, h_q]))


def answer_rank(
    params: MLPParams,
    question: str,
    candidates: list[tuple[Passage, AnswerSpan, TokenEncoding]],
    k3: int,
) -> list[RankedCandidate]:
    """Score non-null candidates with the answer network; keep the top-k3."""
    ranked = []
    for passage, answer, encoding in candidates:
        if answer.is_null:
            continue
        features = featurize(encoding, answer)
        score = mlp_forward(params, features.h)
        ranked.append(
            RankedCandidate(
                question=question,
                passage_id=passage.passage_id,
                answer=answer,
                s_openqa=score,
            )
        )
    ranked.sort(key=lambda c: (-c.s_openqa, c.passage_id))
    return ranked[: max(k3, 0)]


@dataclass(frozen=True)
class RankerExample:
    """One training question with featurized positives and negatives."""

    question: str
    pos_features: list[np.ndarray]
    neg_features: list[np.ndarray]


@dataclass
class TrainResult:
    params: MLPParams
    loss_trace: list[float] = field(default_factory=list)
    skipped: int = 0


def ranking_loss(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Cross-entropy of each positive against all negatives, averaged."""
    pos_scores = np.asarray(pos_scores, dtype=np.float64)
    neg_scores = np.asarray(neg_scores, dtype=np.float64)
    shift = max(float(pos_scores.max()), float(neg_scores.max()) if neg_scores.size else -math.inf)
    neg_mass = float(np.exp(neg_scores - shift).sum())
    total = 0.0
    for s in pos_scores:
        e = math.exp(float(s) - shift)
        total += math.log(e / (e + neg_mass))
    return -total / pos_scores.shape[0]


def _ranking_loss_grads(pos_scores: np.ndarray, neg_scores: np.ndarray):
    """d(loss)/d(score) for positives and negatives."""
    n_pos = pos_scores.shape[0]
    shift = max(float(pos_scores.max()), float(neg_scores.max()))
    pos_exp = np.exp(pos_scores - shift)
    neg_exp = np.exp(neg_scores - shift)
    neg_mass = float(neg_exp.sum())
    d_pos = np.empty_like(pos_scores)
    d_neg = np.zeros_like(neg_scores)
    for i, e in enumerate(pos_exp):
        z = float(e) + neg_mass
        d_pos[i] = -(1.0 - float(e) / z) / n_pos
        d_neg += (neg_exp / z) / n_pos
    return d_pos, d_neg


def train_answer_ranker(
    params: MLPParams,
    examples: list[RankerExample],
    epochs: int,
    lr: float,
    rng_seed: int,
) -> TrainResult:
    """Plain gradient descent over per-question cross-entropy losses.

    Questions missing positives or negatives are skipped (counted). The loss
    trace records the mean per-question loss of each epoch, measured just
    before each question's update. Deterministic given rng_seed.
    """
    params = params.copy()
    params.validate()
    rng = np.random.default_rng(rng_seed)
    usable = [ex for ex in examples if ex.pos_features and ex.neg_features]
    skipped = len(examples) - len(usable)
    trace: list[float] = []
    for _ in range(epochs):
        epoch_losses = []
        for ex in usable:
            masks = [
                _dropout_mask(params, rng)
                for _ in range(len(ex.pos_features) + len(ex.neg_features))
            ]
            pos_scores = np.array([
                float(mlp_apply_masked(params, h, masks[i])[0])
                for i, h in enumerate(ex.pos_features)
            ])
            neg_scores = np.array([
                float(mlp_apply_masked(params, h, masks[len(ex.pos_features) + j])[0])
                for j, h in enumerate(ex.neg_features)
            ])
            epoch_losses.append(ranking_loss(pos_scores, neg_scores))
            d_pos, d_neg = _ranking_loss_grads(pos_scores, neg_scores)
            total = None
            for h, up, mask in zip(
                ex.pos_features + ex.neg_features,
                np.concatenate([d_pos, d_neg]),
                masks,
            ):
                g = mlp_grad(params, h, up, mask=mask)
                if total is None:
                    total = g
                else:
                    total.add_(g)
            sgd_step(params, total, lr)
        trace.append(float(np.mean(epoch_losses)) if epoch_losses else 0.0)
    return TrainResult(params=params, loss_trace=trace, skipped=skipped)


def mlp_apply_masked(params: MLPParams, x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    """Forward pass under a fixed dropout mask (None means inference)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.d_in,):
        raise ValueError(f"input shape {x.shape} != ({params.d_in},)")
    a = np.maximum(x @ params.w1 + params.b1, 0.0)
    if mask is not None:
        a = a * mask
    return a @ params.w2 + params.b2


def positive_first_rate(params: MLPParams, examples: list[RankerExample]) -> float:
    """Fraction of questions whose best positive outscores every negative."""
    wins = 0
    usable = 0
    for ex in examples:
        if not ex.pos_features or not ex.neg_features:
            continue
        usable += 1
        best_pos = max(mlp_forward(params, h) for h in ex.pos_features)
        best_neg = max(mlp_forward(params, h) for h in ex.neg_features)
        if best_pos > best_neg:
            wins += 1
    return wins / usable if usable else 0.0
