"""Corpus ingestion and Okapi BM25 retrieval.

The corpus file format is UTF-8 JSONL with one document per line carrying
``id``, ``title``, and ``text`` string fields (the layout of the common
Wikipedia passage dumps).  Retrieval is plain Okapi BM25 over
lowercased alphanumeric tokens with no stemming and no stopword removal,
using the non-negative idf variant ``ln(1 + (N - df + 0.5) / (df + 0.5))``
and defaults k1 = 0.9, b = 0.4.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs."""
    return _TOKEN_RE.findall(text.lower())


class CorpusFormatError(ValueError):
    """A corpus file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


@dataclass(frozen=True)
class Document:
    """One retrievable unit: a stable key plus title and body text."""

    doc_key: str
    title: str
    body: str

    def __post_init__(self):
        if not self.doc_key:
            raise ValueError("doc_key must be non-empty")
        if not self.title.strip():
            raise ValueError(f"document {self.doc_key!r}: empty title")
        if not self.body.strip():
            raise ValueError(f"document {self.doc_key!r}: empty body")

    def content_key(self) -> tuple[str, str]:
        """Whitespace-collapsed (title, body) pair; the dedup identity."""
        return (" ".join(self.title.split()), " ".join(self.body.split()))


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 0.9
    b: float = 0.4

    def __post_init__(self):
        if self.k1 <= 0:
            raise ValueError("k1 must be > 0")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError("b must be in [0, 1]")


@dataclass(frozen=True)
class ScoredDoc:
    """A retrieval hit: the document, its BM25 score, and 1-based rank."""

    document: Document
    score: float
    rank: int


class Corpus:
    """An ordered, immutable collection of documents with unique keys."""

    def __init__(self, documents: list[Document]):
        self._documents = list(documents)
        self._by_key: dict[str, Document] = {}
        for doc in self._documents:
            if doc.doc_key in self._by_key:
                raise CorpusFormatError(f"duplicate doc_key {doc.doc_key!r}")
            self._by_key[doc.doc_key] = doc

    @property
    def documents(self) -> list[Document]:
        return list(self._documents)

    def __len__(self) -> int:
        return len(self._documents)

    def __iter__(self):
        return iter(self._documents)

    def get(self, doc_key: str) -> Document:
        return self._by_key[doc_key]

    def __contains__(self, doc_key: str) -> bool:
        return doc_key in self._by_key


def ingest_corpus(path: str | Path, fmt: str = "jsonl") -> Corpus:
    """Load a corpus file, validating every record.

    Args:
        path: corpus file location.
        fmt: format tag; only "jsonl" is supported.

    Returns:
        A Corpus with documents in file order.

    Raises:
        FileNotFoundError: the path does not exist.
        CorpusFormatError: malformed JSON, missing or empty fields, or a
            duplicate id; the message names the offending line.
    """
    if fmt != "jsonl":
        raise CorpusFormatError(f"unsupported corpus format {fmt!r}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))

    documents: list[Document] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"invalid JSON ({exc.msg})", line_no) from exc
            if not isinstance(record, dict):
                raise CorpusFormatError("record is not an object", line_no)
            for field_name in ("id", "title", "text"):
                if field_name not in record:
                    raise CorpusFormatError(f"missing field {field_name!r}", line_no)
                if not isinstance(record[field_name], str):
                    raise CorpusFormatError(f"field {field_name!r} is not a string", line_no)
            doc_key = record["id"]
            if doc_key in seen:
                raise CorpusFormatError(
                    f"duplicate id {doc_key!r} (first seen on line {seen[doc_key]})", line_no
                )
            seen[doc_key] = line_no
            try:
                documents.append(Document(doc_key, record["title"], record["text"]))
            except ValueError as exc:
                raise CorpusFormatError(str(exc), line_no) from exc
    return Corpus(documents)


class Bm25Index:
    """Inverted-index BM25 over a corpus.

    The index is immutable after construction and safe for concurrent
    reads.  Query tokens are scored per occurrence (a repeated query term
    contributes twice).  Ties are broken by ascending doc_key, which makes
    retrieve(q, k) a prefix of retrieve(q, k+1).
    """

    def __init__(self, corpus: Corpus, params: Bm25Params = Bm25Params()):
        self.corpus = corpus
        self.params = params
        self._postings: dict[str, dict[str, int]] = {}
        self._doc_len: dict[str, int] = {}
        for doc in corpus:
            tokens = tokenize(doc.title) + tokenize(doc.body)
            self._doc_len[doc.doc_key] = len(tokens)
            for token in tokens:
                bucket = self._postings.setdefault(token, {})
                bucket[doc.doc_key] = bucket.get(doc.doc_key, 0) + 1
        self._n_docs = len(corpus)
        total = sum(self._doc_len.values())
        self._avg_len = (total / self._n_docs) if self._n_docs else 0.0
        self._idf = {
            token: math.log(1.0 + (self._n_docs - len(bucket) + 0.5) / (len(bucket) + 0.5))
            for token, bucket in self._postings.items()
        }

    @property
    def vocabulary_size(self) -> int:
        return len(self._postings)

    def doc_length(self, doc_key: str) -> int:
        return self._doc_len[doc_key]

    def retrieve(self, query: str, k: int = 3) -> list[ScoredDoc]:
        """Top-k documents by BM25 score.

        Only documents sharing at least one token with the query are
        returned, so k larger than the corpus yields every matching doc.
        An empty or whitespace-only query yields an empty result.
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        tokens = tokenize(query)
        if not tokens or not self._n_docs:
            return []
        k1, b = self.params.k1, self.params.b
        scores: dict[str, float] = {}
        for token in tokens:
            bucket = self._postings.get(token)
            if not bucket:
                continue
            idf = self._idf[token]
            for doc_key, tf in bucket.items():
                norm = k1 * (1.0 - b + b * self._doc_len[doc_key] / self._avg_len)
                scores[doc_key] = scores.get(doc_key, 0.0) + idf * tf * (k1 + 1.0) / (tf + norm)
        ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))[:k]
        return [
            ScoredDoc(self.corpus.get(doc_key), score, rank)
            for rank, (doc_key, score) in enumerate(ranked, start=1)
        ]


def build_index(corpus: Corpus, params: Bm25Params = Bm25Params()) -> Bm25Index:
    return Bm25Index(corpus, params)


def save_snapshot(index: Bm25Index, path: str | Path) -> None:
    """Write a deterministic snapshot (params plus documents) to disk.

    The snapshot stores the inputs, not the postings; loading rebuilds the
    index.  Identical inputs produce byte-identical snapshots.
    """
    payload = {
        "format": "bm25-snapshot-v1",
        "params": {"k1": index.params.k1, "b": index.params.b},
        "documents": [
            {"id": doc.doc_key, "title": doc.title, "text": doc.body}
            for doc in index.corpus
        ],
    }
    data = json.dumps(payload, sort_keys=True, ensure_ascii=True)
    Path(path).write_text(data, encoding="utf-8")


def load_snapshot(path: str | Path) -> Bm25Index:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != "bm25-snapshot-v1":
        raise CorpusFormatError(f"not an index snapshot: {path}")
    params = Bm25Params(**payload["params"])
    corpus = Corpus([Document(r["id"], r["title"], r["text"]) for r in payload["documents"]])
    return Bm25Index(corpus, params)
