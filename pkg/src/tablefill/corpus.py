"""Documents, tokenization, and sliding-window passage chunking.

Documents are read as a token stream and cut into fixed-size overlapping
windows; each window becomes one retrieval passage. The tokenizer is a small
deterministic rule set: whitespace split, trailing punctuation detached one
character at a time, and the possessive "'s" split into its own token.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from typing import Iterable, Iterator

# Tokens never split further (the subject-mask tag must survive tokenization).
RESERVED_TOKENS = frozenset({"<sub_mask>"})

_PUNCT = frozenset(string.punctuation)


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    text: str

    def validate(self) -> None:
        if not self.doc_id:
            raise ValueError("document has empty doc_id")
        if not self.text.strip():
            raise ValueError(f"document {self.doc_id!r} has empty text")


@dataclass(frozen=True)
class Passage:
    """One sliding-window chunk of a document's token stream.

    token_start/token_end index into the document token stream (end exclusive);
    text is the space-joined token list and re-tokenizes to the same tokens.
    """

    passage_id: str
    doc_id: str
    token_start: int
    token_end: int
    text: str
    tokens: tuple[str, ...]


@dataclass(frozen=True)
class ChunkConfig:
    chunk_size: int = 100
    stride: int = 50

    def validate(self) -> None:
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.stride > self.chunk_size:
            raise ValueError(
                f"stride ({self.stride}) must not exceed chunk_size ({self.chunk_size})"
            )


def _split_chunk(chunk: str) -> list[str]:
    if chunk in RESERVED_TOKENS:
        return [chunk]
    trailing: list[str] = []
    while len(chunk) > 1 and chunk not in RESERVED_TOKENS and chunk[-1] in _PUNCT:
        trailing.append(chunk[-1])
        chunk = chunk[:-1]
    if len(chunk) > 2 and chunk.lower().endswith("'s"):
        parts = [chunk[:-2], chunk[-2:]]
    else:
        parts = [chunk]
    trailing.reverse()
    return parts + trailing


def tokenize(text: str) -> list[str]:
    """Split text into tokens, preserving case.

    Whitespace-separated chunks are post-processed: trailing punctuation
    characters become their own tokens and a possessive "'s" suffix is
    detached. Reserved tokens pass through untouched.
    """
    out: list[str] = []
    for chunk in text.split():
        out.extend(_split_chunk(chunk))
    return out


def tokenize_with_offsets(text: str) -> list[tuple[str, int, int]]:
    """Like tokenize() but returns (token, char_start, char_end) triples."""
    out: list[tuple[str, int, int]] = []
    pos = 0
    for chunk in text.split():
        start = text.index(chunk, pos)
        pos = start + len(chunk)
        parts = _split_chunk(chunk)
        # Parts partition the chunk back-to-front for trailing punctuation;
        # recover each part's char span by scanning left to right.
        cursor = start
        for part in parts:
            out.append((part, cursor, cursor + len(part)))
            cursor += len(part)
    return out


def chunk_stream(tokens: list[str], cfg: ChunkConfig) -> list[tuple[int, int]]:
    """Enumerate window spans [start, end) over a token stream.

    Windows start at multiples of the stride and have chunk_size tokens except
    possibly the last. A trailing window fully contained in its predecessor is
    dropped, so no window duplicates a suffix of the previous one.
    """
    cfg.validate()
    n = len(tokens)
    spans: list[tuple[int, int]] = []
    start = 0
    while start < n:
        end = min(start + cfg.chunk_size, n)
        if spans and end == spans[-1][1]:
            break
        spans.append((start, end))
        if end == n:
            break
        start += cfg.stride
    return spans


def chunk_document(doc: Document, cfg: ChunkConfig) -> list[Passage]:
    doc.validate()
    tokens = tokenize(doc.text)
    passages = []
    for i, (start, end) in enumerate(chunk_stream(tokens, cfg)):
        window = tuple(tokens[start:end])
        passages.append(
            Passage(
                passage_id=f"{doc.doc_id}#{i}",
                doc_id=doc.doc_id,
                token_start=start,
                token_end=end,
                text=" ".join(window),
                tokens=window,
            )
        )
    return passages


def chunk_corpus(docs: Iterable[Document], cfg: ChunkConfig) -> Iterator[Passage]:
    """Chunk a document stream, preserving document order.

    Raises on a duplicate doc_id, naming the offending id.
    """
    cfg.validate()
    seen: set[str] = set()
    for doc in docs:
        if doc.doc_id in seen:
            raise ValueError(f"duplicate doc_id: {doc.doc_id!r}")
        seen.add(doc.doc_id)
        yield from chunk_document(doc, cfg)


def read_corpus_jsonl(path: str) -> Iterator[Document]:
    """Read documents from a JSONL file: one {"doc_id","title","text"} per line."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                yield Document(
                    doc_id=obj["doc_id"], title=obj.get("title", ""), text=obj["text"]
                )
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc}") from exc
