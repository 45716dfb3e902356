"""Reader contract: extract an answer span from (question, passage) or decline.

Two implementations ship here: a deterministic lexical stub whose behavior is
hand-derivable (so tests can assert exact outcomes), and an HTTP client for an
out-of-process reader service speaking the JSON wire protocol below.

Wire protocol (all floats finite; start=end=-1 encodes a null answer):
    POST /read           {"items":[{"question","passage_tokens","passage_id"}]}
                         -> {"items":[{"start","end","text","s_best","s_null"}]}
    POST /read_backward  same shape, question carries the reverse-question surface
    POST /encode         {"items":[{"question","passage_tokens"}]}
                         -> {"items":[{"q_vecs","p_vecs","cls"}]}
    GET  /dim            -> {"d": int}
"""

from __future__ import annotations

import hashlib
import json
import urllib.error
import urllib.request
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .corpus import Passage, tokenize

# Fixed 25-word stopword list used by the stub heuristic.
STOPWORDS = frozenset(
    "a an and are as at be by did do for from in is it of on or that the to was were what with".split()
)

# How far (in tokens) from a run boundary a question keyword may sit for the
# run to qualify as an answer candidate.
_NEIGHBOR_WINDOW = 3


class ReaderError(Exception):
    """Base class for reader failures."""


class TransportError(ReaderError):
    pass


class MalformedResponseError(ReaderError):
    pass


class DimensionMismatchError(ReaderError):
    pass


@dataclass(frozen=True)
class AnswerSpan:
    """Reader output. start_tok/end_tok are inclusive passage token indices;
    a null answer is (-1, -1, "")."""

    passage_id: str
    start_tok: int
    end_tok: int
    text: str
    s_best: float
    s_null: float
    s_margin: float

    @classmethod
    def make(cls, passage_id, start_tok, end_tok, text, s_best, s_null) -> "AnswerSpan":
        return cls(
            passage_id=passage_id,
            start_tok=start_tok,
            end_tok=end_tok,
            text=text,
            s_best=float(s_best),
            s_null=float(s_null),
            s_margin=float(s_best) - float(s_null),
        )

    @classmethod
    def null(cls, passage_id: str, s_best: float, s_null: float) -> "AnswerSpan":
        return cls.make(passage_id, -1, -1, "", s_best, s_null)

    @property
    def is_null(self) -> bool:
        return self.start_tok == -1 and self.end_tok == -1

    def validate(self, passage_len: int | None = None) -> None:
        if abs(self.s_margin - (self.s_best - self.s_null)) > 1e-12:
            raise ValueError(f"inconsistent margin on {self.passage_id}")
        if self.is_null:
            if self.text:
                raise ValueError(f"null span with text on {self.passage_id}")
            return
        if not (0 <= self.start_tok <= self.end_tok):
            raise ValueError(f"bad span ({self.start_tok},{self.end_tok}) on {self.passage_id}")
        if passage_len is not None and self.end_tok >= passage_len:
            raise ValueError(f"span exceeds passage length on {self.passage_id}")


@dataclass(frozen=True)
class TokenEncoding:
    question_vectors: np.ndarray  # (question tokens, d)
    passage_vectors: np.ndarray  # (passage tokens, d)
    cls_vector: np.ndarray  # (d,)
    d: int


class ReaderContract(ABC):
    """Deterministic reader interface consumed by the funnel."""

    @abstractmethod
    def read(self, question: str, passage: Passage) -> AnswerSpan: ...

    @abstractmethod
    def encode(self, question: str, passage: Passage) -> TokenEncoding: ...

    @abstractmethod
    def dim(self) -> int: ...

    def read_backward(self, reverse_question: str, passage: Passage) -> AnswerSpan:
        """Recover the subject span for a reverse-question surface form."""
        return self.read(reverse_question, passage)

    def read_batch(self, items: list[tuple[str, Passage]]) -> list[AnswerSpan]:
        return [self.read(q, p) for q, p in items]

    def read_backward_batch(self, items: list[tuple[str, Passage]]) -> list[AnswerSpan]:
        return [self.read_backward(q, p) for q, p in items]

    def encode_batch(self, items: list[tuple[str, Passage]]) -> list[TokenEncoding]:
        return [self.encode(q, p) for q, p in items]


def _question_token_sets(question: str) -> tuple[set[str], set[str]]:
    """(all question tokens, keyword tokens) — both case-folded.

    Keywords are non-stopword question tokens containing at least one
    alphanumeric character.
    """
    q_tokens = {t.lower() for t in tokenize(question)}
    keywords = {
        t for t in q_tokens if t not in STOPWORDS and any(c.isalnum() for c in t)
    }
    return q_tokens, keywords


def stub_read(question: str, passage: Passage, seed: int = 0) -> AnswerSpan:
    """Lexical answer heuristic.

    Candidate runs are maximal contiguous stretches of passage tokens that are
    not question tokens, not stopwords, and contain an alphanumeric character.
    A run qualifies when a question keyword occurs in the passage within
    _NEIGHBOR_WINDOW positions of either run boundary. The longest qualifying
    run (leftmost on ties) is the answer with s_best = run length;
    s_null = 0.5 * number of question keywords absent from the passage.
    """
    del seed  # reads are purely lexical; the seed only shapes encodings
    if not passage.tokens:
        raise ValueError(f"empty passage {passage.passage_id!r}")
    q_tokens, keywords = _question_token_sets(question)
    folded = [t.lower() for t in passage.tokens]
    present = set(folded)
    s_null = 0.5 * sum(1 for k in keywords if k not in present)

    keyword_positions = [i for i, t in enumerate(folded) if t in keywords]

    def near_keyword(start: int, end: int) -> bool:
        return any(
            (start - _NEIGHBOR_WINDOW <= k < start) or (end < k <= end + _NEIGHBOR_WINDOW)
            for k in keyword_positions
        )

    best: tuple[int, int] | None = None
    i = 0
    n = len(folded)
    while i < n:
        t = folded[i]
        if t in q_tokens or t in STOPWORDS or not any(c.isalnum() for c in t):
            i += 1
            continue
        j = i
        while (
            j + 1 < n
            and folded[j + 1] not in q_tokens
            and folded[j + 1] not in STOPWORDS
            and any(c.isalnum() for c in folded[j + 1])
        ):
            j += 1
        if near_keyword(i, j) and (best is None or (j - i) > (best[1] - best[0])):
            best = (i, j)
        i = j + 1

    if best is None:
        return AnswerSpan.null(passage.passage_id, 0.0, s_null)
    start, end = best
    return AnswerSpan.make(
        passage.passage_id,
        start,
        end,
        " ".join(passage.tokens[start : end + 1]),
        float(end - start + 1),
        s_null,
    )


def _token_vector(token: str, seed: int, d: int) -> np.ndarray:
    digest = hashlib.blake2b(
        token.lower().encode("utf-8"), digest_size=8, key=str(seed).encode("ascii")
    ).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "big"))
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def stub_encode(question: str, passage: Passage, seed: int = 0, d: int = 32) -> TokenEncoding:
    """Hash-based unit-norm token vectors; identical tokens share vectors."""
    if d < 4 or d % 2 != 0:
        raise ValueError(f"embedding dim must be even and >= 4, got {d}")
    cache: dict[str, np.ndarray] = {}

    def vec(tok: str) -> np.ndarray:
        key = tok.lower()
        if key not in cache:
            cache[key] = _token_vector(key, seed, d)
        return cache[key]

    q_vecs = np.array([vec(t) for t in tokenize(question)], dtype=np.float64).reshape(-1, d)
    p_vecs = np.array([vec(t) for t in passage.tokens], dtype=np.float64).reshape(-1, d)
    return TokenEncoding(
        question_vectors=q_vecs,
        passage_vectors=p_vecs,
        cls_vector=vec("<cls>"),
        d=d,
    )


class StubReader(ReaderContract):
    """In-process deterministic reader; safe for concurrent use."""

    def __init__(self, seed: int = 0, d: int = 32):
        if d < 4 or d % 2 != 0:
            raise ValueError(f"embedding dim must be even and >= 4, got {d}")
        self.seed = seed
        self._d = d

    def read(self, question: str, passage: Passage) -> AnswerSpan:
        return stub_read(question, passage, self.seed)

    def encode(self, question: str, passage: Passage) -> TokenEncoding:
        return stub_encode(question, passage, self.seed, self._d)

    def dim(self) -> int:
        return self._d


class RemoteReader(ReaderContract):
    """HTTP client for a reader service implementing the wire protocol.

    Batch calls map to one request; responses are order-preserving. Errors are
    surfaced with the failing question/passage context.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self._d: int | None = None

    def _request(self, path: str, payload: dict | None, context: str) -> dict:
        url = f"{self.endpoint}{path}"
        data = None
        headers = {}
        if payload is not None:
            data = json.dumps(payload).encode("utf-8")
            headers["Content-Type"] = "application/json"
        req = urllib.request.Request(url, data=data, headers=headers)
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = resp.read()
        except urllib.error.HTTPError as exc:
            raise TransportError(f"{url} returned HTTP {exc.code} ({context})") from exc
        except (urllib.error.URLError, OSError, TimeoutError) as exc:
            raise TransportError(f"cannot reach {url} ({context}): {exc}") from exc
        try:
            return json.loads(body)
        except json.JSONDecodeError as exc:
            raise MalformedResponseError(f"{url} returned invalid JSON ({context})") from exc

    def dim(self) -> int:
        if self._d is None:
            obj = self._request("/dim", None, "dim probe")
            if not isinstance(obj.get("d"), int) or obj["d"] < 1:
                raise MalformedResponseError(f"{self.endpoint}/dim returned {obj!r}")
            self._d = obj["d"]
        return self._d

    def _read_path(self, path: str, items: list[tuple[str, Passage]]) -> list[AnswerSpan]:
        if not items:
            return []
        payload = {
            "items": [
                {"question": q, "passage_tokens": list(p.tokens), "passage_id": p.passage_id}
                for q, p in items
            ]
        }
        context = f"{len(items)} items, first passage {items[0][1].passage_id!r}"
        obj = self._request(path, payload, context)
        out_items = obj.get("items")
        if not isinstance(out_items, list) or len(out_items) != len(items):
            raise MalformedResponseError(
                f"{path}: expected {len(items)} items, got {out_items!r} ({context})"
            )
        spans = []
        for (q, p), rec in zip(items, out_items):
            try:
                spans.append(
                    AnswerSpan.make(
                        p.passage_id,
                        int(rec["start"]),
                        int(rec["end"]),
                        rec["text"],
                        float(rec["s_best"]),
                        float(rec["s_null"]),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedResponseError(
                    f"{path}: bad item for passage {p.passage_id!r}, question {q!r}: {exc}"
                ) from exc
        return spans

    def read(self, question: str, passage: Passage) -> AnswerSpan:
        return self._read_path("/read", [(question, passage)])[0]

    def read_backward(self, reverse_question: str, passage: Passage) -> AnswerSpan:
        return self._read_path("/read_backward", [(reverse_question, passage)])[0]

    def read_batch(self, items: list[tuple[str, Passage]]) -> list[AnswerSpan]:
        return self._read_path("/read", items)

    def read_backward_batch(self, items: list[tuple[str, Passage]]) -> list[AnswerSpan]:
        return self._read_path("/read_backward", items)

    def encode(self, question: str, passage: Passage) -> TokenEncoding:
        return self.encode_batch([(question, passage)])[0]

    def encode_batch(self, items: list[tuple[str, Passage]]) -> list[TokenEncoding]:
        if not items:
            return []
        d = self.dim()
        payload = {
            "items": [
                {"question": q, "passage_tokens": list(p.tokens)} for q, p in items
            ]
        }
        context = f"{len(items)} items, first passage {items[0][1].passage_id!r}"
        obj = self._request("/encode", payload, context)
        out_items = obj.get("items")
        if not isinstance(out_items, list) or len(out_items) != len(items):
            raise MalformedResponseError(
                f"/encode: expected {len(items)} items ({context})"
            )
        encodings = []
        for (q, p), rec in zip(items, out_items):
            try:
                q_raw, p_raw, cls_raw = rec["q_vecs"], rec["p_vecs"], rec["cls"]
                q_vecs = np.asarray(q_raw, dtype=np.float64) if q_raw else np.zeros((0, d))
                p_vecs = np.asarray(p_raw, dtype=np.float64) if p_raw else np.zeros((0, d))
                cls_vec = np.asarray(cls_raw, dtype=np.float64)
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedResponseError(
                    f"/encode: bad item for passage {p.passage_id!r}: {exc}"
                ) from exc
            for name, mat in (("q_vecs", q_vecs), ("p_vecs", p_vecs)):
                if mat.ndim != 2:
                    raise MalformedResponseError(
                        f"/encode: {name} is not a matrix (passage {p.passage_id!r})"
                    )
                if mat.shape[0] and mat.shape[1] != d:
                    raise DimensionMismatchError(
                        f"/encode: {name} dim {mat.shape[1]} != service dim {d} "
                        f"(passage {p.passage_id!r}, question {q!r})"
                    )
            if cls_vec.shape != (d,):
                raise DimensionMismatchError(
                    f"/encode: cls dim {cls_vec.shape} != ({d},) (passage {p.passage_id!r})"
                )
            encodings.append(
                TokenEncoding(
                    question_vectors=q_vecs,
                    passage_vectors=p_vecs,
                    cls_vector=cls_vec,
                    d=d,
                )
            )
        return encodings
