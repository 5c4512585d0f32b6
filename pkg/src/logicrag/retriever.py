"""Lexical BM25 index over a passage corpus, plus an optional dense mode.

Passages are indexed exactly as given (no re-chunking). The on-disk index
is a directory holding ``manifest.json``, ``postings.json``,
``passages.jsonl`` and, in dense mode, ``embeddings.npy``.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

import numpy as np
import requests

K1 = 1.2
B = 0.75
FORMAT_VERSION = 1

_PUNCT = re.compile(r"[^\w\s]|_")


class RetrievalError(ValueError):
    pass


class CorpusError(RetrievalError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class DuplicateId(CorpusError):
    pass


class EmptyPassage(CorpusError):
    pass


class MalformedRecord(CorpusError):
    pass


class EmptyQuery(RetrievalError):
    pass


class BackendUnavailable(RetrievalError):
    pass


class DimensionMismatch(RetrievalError):
    pass


def normalize(text: str) -> list[str]:
    """Lowercase, turn punctuation into spaces and split on whitespace.

    >>> normalize("Warsaw Pact, 1955!")
    ['warsaw', 'pact', '1955']
    """
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass(frozen=True)
class PassageChunk:
    id: str
    text: str
    title: str | None = None
    token_count: int = 0


@dataclass(frozen=True)
class ScoredPassage:
    passage: PassageChunk
    score: float
    rank: int


@dataclass
class CorpusIndex:
    passages: dict[str, PassageChunk]
    term_postings: dict[str, list[tuple[str, int]]]
    doc_lengths: dict[str, int]
    avg_doc_length: float
    doc_count: int
    k1: float = K1
    b: float = B
    embeddings: np.ndarray | None = field(default=None, repr=False)
    dense_model: str | None = None

    @property
    def ids(self) -> list[str]:
        return list(self.passages)

    @property
    def dense(self) -> bool:
        return self.embeddings is not None


def read_jsonl(lines: Iterable[str]) -> Iterable[tuple[int, Any]]:
    """Yield ``(line_number, parsed_object)`` pairs, skipping blank lines."""
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            yield lineno, json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedRecord(lineno, f"invalid JSON ({exc.msg})") from None


def ingest_corpus(source: Iterable[Mapping[str, Any] | tuple[int, Mapping[str, Any]]]) -> CorpusIndex:
    """Build a BM25 index from passage records.

    ``source`` yields either records or ``(line_number, record)`` pairs as
    produced by :func:`read_jsonl`; errors cite the line number.
    """
    passages: dict[str, PassageChunk] = {}
    postings: dict[str, list[tuple[str, int]]] = {}
    lengths: dict[str, int] = {}
    for pos, item in enumerate(source, start=1):
        lineno, rec = item if isinstance(item, tuple) else (pos, item)
        if not isinstance(rec, Mapping):
            raise MalformedRecord(lineno, "record is not an object")
        pid, text, title = rec.get("id"), rec.get("text"), rec.get("title")
        if not isinstance(pid, str) or not pid:
            raise MalformedRecord(lineno, "missing or non-string 'id'")
        if not isinstance(text, str):
            raise MalformedRecord(lineno, "missing or non-string 'text'")
        if title is not None and not isinstance(title, str):
            raise MalformedRecord(lineno, "'title' must be a string or null")
        if pid in passages:
            raise DuplicateId(lineno, f"duplicate passage id {pid!r}")
        terms = normalize(text)
        if not text.strip() or not terms:
            raise EmptyPassage(lineno, f"passage {pid!r} has no text")

        passages[pid] = PassageChunk(pid, text, title, len(terms))
        lengths[pid] = len(terms)
        tf: dict[str, int] = {}
        for t in terms:
            tf[t] = tf.get(t, 0) + 1
        for t, c in tf.items():
            postings.setdefault(t, []).append((pid, c))

    n = len(passages)
    avg = sum(lengths.values()) / n if n else 0.0
    return CorpusIndex(passages, postings, lengths, avg, n)


def load_corpus(path: str | Path) -> CorpusIndex:
    with open(path, encoding="utf-8") as fh:
        return ingest_corpus(read_jsonl(fh))


def idf(doc_count: int, doc_freq: int) -> float:
    # Non-negative variant so that very common terms never subtract score.
    return math.log(1.0 + (doc_count - doc_freq + 0.5) / (doc_freq + 0.5))


def _query_terms(query: str) -> list[str]:
    terms = list(dict.fromkeys(normalize(query)))
    if not terms:
        raise EmptyQuery(f"query {query!r} has no searchable terms")
    return terms


def _top_k(index: CorpusIndex, scores: Mapping[str, float], k: int) -> list[ScoredPassage]:
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = sorted(index.passages, key=lambda pid: (-scores.get(pid, 0.0), pid))[:k]
    return [ScoredPassage(index.passages[pid], scores.get(pid, 0.0), r) for r, pid in enumerate(ranked, 1)]


def retrieve(index: CorpusIndex, query: str, k: int = 3) -> list[ScoredPassage]:
    """Top-k passages by BM25; ties go to the smaller passage id."""
    terms = _query_terms(query)
    scores: dict[str, float] = dict.fromkeys(index.passages, 0.0)
    for t in terms:
        plist = index.term_postings.get(t)
        if not plist:
            continue
        w = idf(index.doc_count, len(plist))
        for pid, tf in plist:
            norm = index.k1 * (1.0 - index.b + index.b * index.doc_lengths[pid] / index.avg_doc_length)
            scores[pid] += w * tf * (index.k1 + 1.0) / (tf + norm)
    return _top_k(index, scores, k)


class EmbeddingBackend(Protocol):
    def embed(self, texts: Sequence[str]) -> Sequence[Sequence[float]]: ...


class HttpEmbeddingBackend:
    """Client for an embeddings endpoint speaking the common wire shape.

    POSTs ``{"input": [...], "model": ...}`` to ``url`` and reads
    ``data[i].embedding``.
    """

    def __init__(self, url: str, model: str, *, timeout: float = 60.0, api_key: str | None = None, batch_size: int = 64):
        self.url = url
        self.model = model
        self.timeout = timeout
        self.api_key = api_key
        self.batch_size = batch_size

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        out: list[list[float]] = []
        for start in range(0, len(texts), self.batch_size):
            batch = list(texts[start:start + self.batch_size])
            try:
                resp = requests.post(self.url, json={"input": batch, "model": self.model},
                                     headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                data = resp.json()["data"]
            except (requests.RequestException, ValueError, KeyError, TypeError) as exc:
                raise BackendUnavailable(f"embedding backend {self.url}: {exc}") from exc
            if len(data) != len(batch):
                raise BackendUnavailable(f"embedding backend returned {len(data)} vectors for {len(batch)} inputs")
            out.extend(item["embedding"] for item in data)
        return out


def _unit_rows(vectors: Sequence[Sequence[float]]) -> np.ndarray:
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatch(f"expected a 2-d batch of vectors, got shape {arr.shape}")
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    return np.divide(arr, norms, out=np.zeros_like(arr), where=norms > 0)


def attach_embeddings(index: CorpusIndex, backend: EmbeddingBackend, model: str | None = None) -> CorpusIndex:
    """Compute unit-normalized passage embeddings in index order, in place."""
    vectors = backend.embed([p.text for p in index.passages.values()])
    emb = _unit_rows(vectors)
    if emb.shape[0] != index.doc_count:
        raise DimensionMismatch(f"{emb.shape[0]} embeddings for {index.doc_count} passages")
    index.embeddings = emb
    index.dense_model = model or getattr(backend, "model", None)
    return index


def embed_retrieve(index: CorpusIndex, query: str, k: int, backend: EmbeddingBackend) -> list[ScoredPassage]:
    """Top-k passages by cosine similarity to the embedded query."""
    if index.embeddings is None:
        raise RetrievalError("index was built without dense embeddings")
    if not query.strip():
        raise EmptyQuery("empty query")
    q = _unit_rows(backend.embed([query]))
    if q.shape[1] != index.embeddings.shape[1]:
        raise DimensionMismatch(f"query dim {q.shape[1]} != passage dim {index.embeddings.shape[1]}")
    sims = index.embeddings @ q[0]
    scores = {pid: float(s) for pid, s in zip(index.passages, sims)}
    return _top_k(index, scores, k)


def save_index(index: CorpusIndex, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "doc_count": index.doc_count,
        "avg_doc_length": index.avg_doc_length,
        "bm25": {"k1": index.k1, "b": index.b},
        "dense": index.dense,
        "dense_model": index.dense_model,
    }
    with open(d / "passages.jsonl", "w", encoding="utf-8") as fh:
        for p in index.passages.values():
            fh.write(json.dumps({"id": p.id, "title": p.title, "text": p.text}, ensure_ascii=False) + "\n")
    with open(d / "postings.json", "w", encoding="utf-8") as fh:
        json.dump({t: [[pid, tf] for pid, tf in pl] for t, pl in index.term_postings.items()}, fh, ensure_ascii=False)
    if index.embeddings is not None:
        np.save(d / "embeddings.npy", index.embeddings)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return d


def load_index(directory: str | Path) -> CorpusIndex:
    d = Path(directory)
    manifest_path = d / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no index found at {d} (missing manifest.json)")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise RetrievalError(f"unsupported index format_version {manifest.get('format_version')!r}")
    passages: dict[str, PassageChunk] = {}
    with open(d / "passages.jsonl", encoding="utf-8") as fh:
        for _, rec in read_jsonl(fh):
            n = len(normalize(rec["text"]))
            passages[rec["id"]] = PassageChunk(rec["id"], rec["text"], rec.get("title"), n)
    postings_raw = json.loads((d / "postings.json").read_text(encoding="utf-8"))
    postings = {t: [(pid, tf) for pid, tf in pl] for t, pl in postings_raw.items()}
    embeddings = np.load(d / "embeddings.npy") if manifest.get("dense") else None
    return CorpusIndex(
        passages=passages,
        term_postings=postings,
        doc_lengths={pid: p.token_count for pid, p in passages.items()},
        avg_doc_length=manifest["avg_doc_length"],
        doc_count=manifest["doc_count"],
        k1=manifest["bm25"]["k1"],
        b=manifest["bm25"]["b"],
        embeddings=embeddings,
        dense_model=manifest.get("dense_model"),
    )
