"""Sliding-window passages, label inheritance and score aggregation."""

from __future__ import annotations

import enum
import json
import logging
import math
import random
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .corpus import DataError, Document, atomic_write_text
from .textprep import whitespace_words

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 150
DEFAULT_STRIDE = 75
DEFAULT_MAX_PASSAGES = 30
DEFAULT_NEG_RATIO = 4


@dataclass(frozen=True)
class Passage:
    doc_id: str
    passage_index: int
    word_span: tuple[int, int]
    text: str
    label: int | None = None

    def to_json(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "passage_index": self.passage_index,
            "span": list(self.word_span),
            "text": self.text,
            "label": self.label,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Passage":
        return cls(obj["doc_id"], int(obj["passage_index"]), tuple(obj["span"]), obj["text"], obj.get("label"))


class AggregationMode(str, enum.Enum):
    FIRST = "FirstP"
    MAX = "MaxP"
    SUM = "SumP"


def window_starts(n_words: int, window: int, stride: int) -> list[int]:
    """Starts 0, stride, ... up to the first start whose window reaches the end."""
    if n_words <= window:
        return [0]
    last = math.ceil((n_words - window) / stride) * stride
    return list(range(0, last + 1, stride))


def passage_count(n_words: int, window: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE) -> int:
    return max(1, math.ceil((n_words - window) / stride) + 1)


def segment_document(
    doc: Document,
    window: int = DEFAULT_WINDOW,
    stride: int = DEFAULT_STRIDE,
    prepend_title: bool = False,
    max_passages: int | None = DEFAULT_MAX_PASSAGES,
) -> list[Passage]:
    if not (window >= stride >= 1):
        raise ValueError(f"need window >= stride >= 1, got window={window} stride={stride}")
    words = whitespace_words(doc.body)
    title = (doc.title or "").strip()
    if not words and not title:
        raise DataError(f"document {doc.doc_id!r} is empty")
    starts = window_starts(len(words), window, stride)
    if max_passages is not None and len(starts) > max_passages:
        log.warning("document %s: %d passages capped at %d", doc.doc_id, len(starts), max_passages)
        starts = starts[:max_passages]
    out = []
    for i, s in enumerate(starts):
        e = min(s + window, len(words))
        body = " ".join(words[s:e])
        text = f"{title} {body}".strip() if prepend_title and title else body
        if not text:
            # title-only document without prepending still yields its title
            text = title
        out.append(Passage(doc.doc_id, i, (s, e), text))
    return out


def label_passages(passages: Sequence[Passage], doc_is_relevant: bool | int) -> list[Passage]:
    label = 1 if doc_is_relevant else 0
    return [replace(p, label=label) for p in passages]


def aggregate_scores(passage_scores: Sequence[float], mode: AggregationMode | str) -> float:
    if len(passage_scores) == 0:
        raise ValueError("cannot aggregate an empty passage score list")
    mode = AggregationMode(mode)
    if mode is AggregationMode.FIRST:
        return float(passage_scores[0])
    if mode is AggregationMode.MAX:
        return float(max(passage_scores))
    return float(math.fsum(passage_scores))


def balance_examples(
    examples: Sequence[tuple[str, Passage]],
    neg_ratio: int | None = DEFAULT_NEG_RATIO,
    seed: int = 0,
) -> list[tuple[str, Passage]]:
    """Downsample negative (query, passage) examples to ``neg_ratio`` per positive per query.

    Queries without positives keep ``neg_ratio`` negatives.  ``None`` keeps all.
    """
    if neg_ratio is None:
        return list(examples)
    rng = random.Random(seed)
    by_query: dict[str, tuple[list, list]] = {}
    for q, p in examples:
        pos, neg = by_query.setdefault(q, ([], []))
        (pos if p.label else neg).append((q, p))
    out = []
    for q in sorted(by_query):
        pos, neg = by_query[q]
        keep = neg_ratio * max(1, len(pos))
        if len(neg) > keep:
            neg = rng.sample(neg, keep)
        out.extend(pos)
        out.extend(neg)
    return out


def write_passages(passages: Iterable[Passage], path) -> None:
    atomic_write_text(path, "".join(json.dumps(p.to_json()) + "\n" for p in passages))


def read_passages(path) -> list[Passage]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(Passage.from_json(json.loads(line)))
                except (KeyError, ValueError, TypeError) as exc:
                    raise DataError(f"{path}:{lineno}: malformed passage record ({exc})") from exc
    return out
