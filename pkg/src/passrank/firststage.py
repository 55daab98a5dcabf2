"""Positional inverted index with BM25 and sequential-dependence retrieval."""

from __future__ import annotations

import json
import math
from bisect import bisect_left, bisect_right
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .corpus import DataError, Document, Ranking
from .textprep import index_terms, is_punct_token, word_tokenize

INDEX_FORMAT = "passrank-index"
INDEX_VERSION = 1

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
DEFAULT_SDM_WEIGHTS = (0.85, 0.10, 0.05)
DEFAULT_WINDOW_O = 1
DEFAULT_WINDOW_U = 8
DEFAULT_DEPTH = 100


@dataclass
class InvertedIndex:
    postings: dict[str, list[tuple[int, list[int]]]]
    doc_lengths: list[int]
    doc_ids: list[str]
    analyzer: str = "standard"
    internal: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.internal:
            self.internal = {d: i for i, d in enumerate(self.doc_ids)}

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    @property
    def avg_doc_length(self) -> float:
        return sum(self.doc_lengths) / len(self.doc_lengths)

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def tf(self, term: str, doc_id: str) -> int:
        i = self.internal[doc_id]
        for d, pos in self.postings.get(term, ()):
            if d == i:
                return len(pos)
        return 0

    def idf(self, df: int) -> float:
        n = self.doc_count
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def save(self, path) -> None:
        obj = {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "analyzer": self.analyzer,
            "doc_ids": self.doc_ids,
            "doc_lengths": self.doc_lengths,
            "postings": {t: [[d, p] for d, p in pl] for t, pl in sorted(self.postings.items())},
        }
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(obj), encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "InvertedIndex":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        if obj.get("format") != INDEX_FORMAT:
            raise DataError(f"{path}: not an index snapshot")
        if obj.get("version") != INDEX_VERSION:
            raise DataError(f"{path}: unsupported index version {obj.get('version')}")
        postings = {t: [(int(d), list(p)) for d, p in pl] for t, pl in obj["postings"].items()}
        return cls(postings, list(obj["doc_lengths"]), list(obj["doc_ids"]), obj.get("analyzer", "standard"))

    def terms(self, text: str) -> list[str]:
        return analyze(text, self.analyzer)


def analyze(text: str, analyzer: str = "standard") -> list[str]:
    """``standard``: stopwords removed and Porter-stemmed; ``plain``: lowercase only."""
    if analyzer == "standard":
        return index_terms(text)
    if analyzer == "plain":
        return [t.lower() for t in word_tokenize(text) if not is_punct_token(t)]
    raise ValueError(f"unknown analyzer {analyzer!r}")


def document_terms(doc: Document, analyzer: str = "standard") -> list[str]:
    text = f"{doc.title} {doc.body}" if doc.title else doc.body
    return analyze(text, analyzer)


def build_index(docs: Iterable[Document], analyzer: str = "standard") -> InvertedIndex:
    postings: dict[str, list[tuple[int, list[int]]]] = defaultdict(list)
    lengths: list[int] = []
    ids: list[str] = []
    seen: set[str] = set()
    for doc in docs:
        if doc.doc_id in seen:
            raise DataError(f"duplicate doc_id {doc.doc_id!r}")
        seen.add(doc.doc_id)
        internal = len(ids)
        ids.append(doc.doc_id)
        terms = document_terms(doc, analyzer)
        lengths.append(len(terms))
        positions: dict[str, list[int]] = defaultdict(list)
        for p, t in enumerate(terms):
            positions[t].append(p)
        for t, pos in positions.items():
            postings[t].append((internal, pos))
    if not ids:
        raise DataError("cannot index an empty document stream")
    return InvertedIndex(dict(postings), lengths, ids, analyzer)


def bm25_term(tf: float, df: int, doc_len: int, index: InvertedIndex, k1: float, b: float) -> float:
    if tf <= 0:
        return 0.0
    norm = k1 * (1.0 - b + b * doc_len / index.avg_doc_length)
    return index.idf(df) * tf * (k1 + 1.0) / (tf + norm)


def _query_terms(index: InvertedIndex, query: str) -> list[str]:
    terms = index.terms(query)
    if not terms:
        raise ValueError(f"query {query!r} has no index terms after normalization")
    return terms


def _gather(index: InvertedIndex, terms: list[str]) -> dict[int, dict[str, list[int]]]:
    hits: dict[int, dict[str, list[int]]] = defaultdict(dict)
    for t in set(terms):
        for d, pos in index.postings.get(t, ()):
            hits[d][t] = pos
    return hits


def _top_k(index: InvertedIndex, scores: dict[int, float], query_id: str, k: int, tag: str) -> Ranking:
    entries = sorted(((index.doc_ids[d], s) for d, s in scores.items()), key=lambda e: (-e[1], e[0]))
    return Ranking(query_id, entries[:k], tag)


def retrieve_bm25(
    index: InvertedIndex,
    query: str,
    k: int = DEFAULT_DEPTH,
    *,
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
    query_id: str = "q",
    run_tag: str = "BOW",
) -> Ranking:
    """Okapi BM25 over the normalized query terms; non-matching docs excluded."""
    if k < 1:
        raise ValueError("k must be >= 1")
    terms = _query_terms(index, query)
    hits = _gather(index, terms)
    scores = {}
    for d, tpos in hits.items():
        L = index.doc_lengths[d]
        scores[d] = sum(
            bm25_term(len(tpos.get(t, ())), index.df(t), L, index, k1, b) for t in terms
        )
    return _top_k(index, scores, query_id, k, run_tag)


def ordered_count(left: list[int], right: list[int], window: int) -> int:
    """Occurrences of ``left`` followed by ``right`` within ``window`` positions."""
    n = 0
    for p in left:
        lo = bisect_left(right, p + 1)
        hi = bisect_right(right, p + window)
        n += hi - lo
    return n


def unordered_count(left: list[int], right: list[int], window: int) -> int:
    """Position pairs of the two terms that fit inside a ``window``-word span."""
    n = 0
    for p in left:
        lo = bisect_left(right, p - window + 1)
        hi = bisect_right(right, p + window - 1)
        n += hi - lo
        # the same position can only pair with itself if the terms coincide
        if left is right:
            n -= 1
    return n


def retrieve_sdm(
    index: InvertedIndex,
    query: str,
    k: int = DEFAULT_DEPTH,
    weights: tuple[float, float, float] = DEFAULT_SDM_WEIGHTS,
    window_o: int = DEFAULT_WINDOW_O,
    window_u: int = DEFAULT_WINDOW_U,
    *,
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
    query_id: str = "q",
    run_tag: str = "SDM",
) -> Ranking:
    """Sequential dependence: unigram, ordered-bigram and unordered-window BM25 mix.

    Candidates are documents matching at least one query term.  With fewer than
    two query terms the BM25 ranking is returned and the run tag gets a
    ``-bm25fallback`` suffix.
    """
    wt, wo, wu = weights
    if min(weights) < 0 or abs(wt + wo + wu - 1.0) > 1e-9:
        raise ValueError(f"SDM weights must be non-negative and sum to 1, got {weights}")
    if window_o < 1 or window_u < 2:
        raise ValueError("window_o must be >= 1 and window_u >= 2")
    terms = _query_terms(index, query)
    if len(terms) < 2:
        return retrieve_bm25(index, query, k, k1=k1, b=b, query_id=query_id, run_tag=f"{run_tag}-bm25fallback")
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = _gather(index, terms)
    pairs = list(zip(terms, terms[1:]))

    tf_o: dict[int, list[int]] = {}
    tf_u: dict[int, list[int]] = {}
    for d, tpos in hits.items():
        tf_o[d] = [ordered_count(tpos.get(a, []), tpos.get(c, []), window_o) for a, c in pairs]
        tf_u[d] = [unordered_count(tpos.get(a, []), tpos.get(c, []), window_u) for a, c in pairs]
    df_o = [sum(1 for d in hits if tf_o[d][i] > 0) for i in range(len(pairs))]
    df_u = [sum(1 for d in hits if tf_u[d][i] > 0) for i in range(len(pairs))]

    scores = {}
    for d, tpos in hits.items():
        L = index.doc_lengths[d]
        uni = sum(bm25_term(len(tpos.get(t, ())), index.df(t), L, index, k1, b) for t in terms)
        ords = sum(bm25_term(tf_o[d][i], df_o[i], L, index, k1, b) for i in range(len(pairs)))
        unos = sum(bm25_term(tf_u[d][i], df_u[i], L, index, k1, b) for i in range(len(pairs)))
        scores[d] = wt * uni + wo * ords + wu * unos
    return _top_k(index, scores, query_id, k, run_tag)
