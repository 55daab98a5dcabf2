"""Corpora, topics, qrels, run files and cross-validation folds."""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class Document:
    doc_id: str
    body: str
    title: str | None = None

    def __post_init__(self):
        if not self.doc_id:
            raise DataError("doc_id must be non-empty")
        if not self.body and not self.title:
            raise DataError(f"document {self.doc_id!r} has neither body nor title")


@dataclass(frozen=True)
class TopicQuery:
    query_id: str
    title: str
    description: str | None = None
    narrative: str | None = None

    def __post_init__(self):
        if not self.title:
            raise DataError(f"topic {self.query_id!r} has an empty title")


@dataclass
class Ranking:
    """Ordered (doc_id, score) list for one query.

    Entries are kept sorted by score descending with doc_id ascending as the
    tie-breaker.
    """

    query_id: str
    entries: list[tuple[str, float]] = field(default_factory=list)
    run_tag: str = "run"

    def __post_init__(self):
        seen = set()
        for doc_id, _ in self.entries:
            if doc_id in seen:
                raise DataError(f"duplicate doc_id {doc_id!r} in ranking for {self.query_id}")
            seen.add(doc_id)
        self.entries = sorted(((d, float(s)) for d, s in self.entries), key=lambda e: (-e[1], e[0]))

    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.entries]

    def truncated(self, k: int) -> "Ranking":
        return Ranking(self.query_id, self.entries[:k], self.run_tag)

    def __len__(self):
        return len(self.entries)


# (query_id, doc_id) -> grade
Judgments = dict


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: dict[str, int]

    def fold(self, i: int) -> list[str]:
        return sorted(q for q, f in self.assignment.items() if f == i)

    def train_queries(self, i: int) -> list[str]:
        return sorted(q for q, f in self.assignment.items() if f != i)

    def to_json(self) -> dict:
        return {"k": self.k, "assignment": dict(sorted(self.assignment.items()))}

    @classmethod
    def from_json(cls, obj: dict) -> "FoldPlan":
        return cls(int(obj["k"]), {str(q): int(f) for q, f in obj["assignment"].items()})


# --------------------------------------------------------------------------
# corpus

def load_corpus(path, format: str = "jsonl") -> Iterator[Document]:
    """Stream documents from ``path``.

    ``format`` is ``"jsonl"`` (one ``{"id", "title", "body"}`` object per line)
    or ``"trectext"`` (``<DOC>`` blocks with ``<DOCNO>``, optional ``<TITLE>``
    or ``<HEADLINE>``, and ``<TEXT>``).  Text is passed through verbatim.
    """
    if format == "jsonl":
        yield from _load_jsonl(Path(path))
    elif format == "trectext":
        yield from _load_trectext(Path(path))
    else:
        raise ValueError(f"unknown corpus format {format!r}")


def _load_jsonl(path: Path) -> Iterator[Document]:
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                doc = Document(doc_id=str(rec["id"]), body=rec.get("body") or "", title=rec.get("title"))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed corpus record ({exc})") from exc
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if doc.doc_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate doc_id {doc.doc_id!r}")
            seen.add(doc.doc_id)
            yield doc


_DOC_RE = re.compile(r"<DOC>(.*?)</DOC>", re.S)


def _tag(block: str, *names: str) -> str | None:
    for name in names:
        m = re.search(rf"<{name}>(.*?)</{name}>", block, re.S)
        if m:
            return m.group(1)
    return None


def _load_trectext(path: Path) -> Iterator[Document]:
    text = path.read_text(encoding="utf-8")
    seen = set()
    pos = 0
    for m in _DOC_RE.finditer(text):
        between = text[pos:m.start()]
        if between.strip():
            raise DataError(f"{path}: offset {pos}: text outside <DOC> block")
        pos = m.end()
        block = m.group(1)
        docno = _tag(block, "DOCNO")
        if docno is None or not docno.strip():
            raise DataError(f"{path}: offset {m.start()}: <DOC> without <DOCNO>")
        title = _tag(block, "TITLE", "HEADLINE")
        body = _tag(block, "TEXT") or ""
        try:
            doc = Document(docno.strip(), body.strip("\n"), title.strip() if title else None)
        except DataError as exc:
            raise DataError(f"{path}: offset {m.start()}: {exc}") from exc
        if doc.doc_id in seen:
            raise DataError(f"{path}: offset {m.start()}: duplicate doc_id {doc.doc_id!r}")
        seen.add(doc.doc_id)
        yield doc
    if text[pos:].strip():
        raise DataError(f"{path}: offset {pos}: unterminated or stray content")


def write_corpus(docs: Iterable[Document], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(json.dumps({"id": d.doc_id, "title": d.title, "body": d.body}) + "\n")


# --------------------------------------------------------------------------
# topics

_TOP_RE = re.compile(r"<top>(.*?)</top>", re.S | re.I)
_FIELD_RE = re.compile(r"<(num|title|desc|narr)>", re.I)


def _clean_field(name: str, value: str) -> str:
    value = value.strip()
    # classic TREC topics carry labels such as "Number:" and "Description:"
    labels = {"num": "Number:", "desc": "Description:", "narr": "Narrative:", "title": "Topic:"}
    label = labels[name]
    if value.lower().startswith(label.lower()):
        value = value[len(label):].strip()
    return " ".join(value.split()) if name != "num" else value


def parse_topics(text: str) -> list[TopicQuery]:
    topics = []
    seen = set()
    for m in _TOP_RE.finditer(text):
        block = m.group(1)
        fields = {}
        # closing tags are optional in TREC topic files
        block = re.sub(r"</(num|title|desc|narr)>", "", block, flags=re.I)
        parts = _FIELD_RE.split(block)
        for name, value in zip(parts[1::2], parts[2::2]):
            fields[name.lower()] = _clean_field(name.lower(), value)
        qid = fields.get("num")
        if not qid:
            raise DataError(f"topic at offset {m.start()} has no <num>")
        if not fields.get("title"):
            raise DataError(f"topic {qid} has no title")
        if qid in seen:
            raise DataError(f"duplicate topic id {qid}")
        seen.add(qid)
        topics.append(TopicQuery(qid, fields["title"], fields.get("desc") or None, fields.get("narr") or None))
    return topics


def load_topics(path) -> list[TopicQuery]:
    return parse_topics(Path(path).read_text(encoding="utf-8"))


def format_topics(topics: Iterable[TopicQuery]) -> str:
    out = []
    for t in topics:
        out.append("<top>")
        out.append(f"<num> {t.query_id} </num>")
        out.append(f"<title> {t.title} </title>")
        if t.description is not None:
            out.append(f"<desc> {t.description} </desc>")
        if t.narrative is not None:
            out.append(f"<narr> {t.narrative} </narr>")
        out.append("</top>\n")
    return "\n".join(out)


# --------------------------------------------------------------------------
# qrels and runs

def parse_qrels(lines: Iterable[str], source: str = "<qrels>") -> Judgments:
    qrels: Judgments = {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DataError(f"{source}:{lineno}: expected 4 fields, got {len(parts)}")
        qid, _, docid, grade = parts
        try:
            g = int(grade)
        except ValueError:
            raise DataError(f"{source}:{lineno}: non-integer grade {grade!r}") from None
        if g < 0:
            raise DataError(f"{source}:{lineno}: negative grade {g}")
        if (qid, docid) in qrels:
            raise DataError(f"{source}:{lineno}: duplicate judgment for ({qid}, {docid})")
        qrels[(qid, docid)] = g
    return qrels


def load_qrels(path) -> Judgments:
    with open(path, encoding="utf-8") as fh:
        return parse_qrels(fh, str(path))


def write_qrels(qrels: Judgments, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (q, d), g in sorted(qrels.items()):
            fh.write(f"{q} 0 {d} {g}\n")


def format_run(rankings: Iterable[Ranking]) -> str:
    lines = []
    for r in rankings:
        for rank, (doc_id, score) in enumerate(r.entries, 1):
            lines.append(f"{r.query_id} Q0 {doc_id} {rank} {score:.6f} {r.run_tag}")
    return "\n".join(lines) + ("\n" if lines else "")


def write_run(rankings: Iterable[Ranking], path) -> None:
    atomic_write_text(path, format_run(rankings))


def parse_run(lines: Iterable[str], source: str = "<run>") -> list[Ranking]:
    by_query: dict[str, list] = {}
    tags: dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise DataError(f"{source}:{lineno}: expected 6 fields, got {len(parts)}")
        qid, _, docid, rank, score, tag = parts
        try:
            rank_i, score_f = int(rank), float(score)
        except ValueError:
            raise DataError(f"{source}:{lineno}: bad rank/score") from None
        entries = by_query.setdefault(qid, [])
        if rank_i != len(entries) + 1:
            raise DataError(f"{source}:{lineno}: rank {rank_i} out of sequence for query {qid}")
        entries.append((docid, score_f))
        tags[qid] = tag
    out = []
    for qid, entries in by_query.items():
        r = Ranking(qid, [], tags[qid])
        seen = set()
        for docid, _ in entries:
            if docid in seen:
                raise DataError(f"{source}: duplicate doc_id {docid!r} for query {qid}")
            seen.add(docid)
        # file order is authoritative; rounded scores may tie
        r.entries = entries
        out.append(r)
    return out


def read_run(path) -> list[Ranking]:
    with open(path, encoding="utf-8") as fh:
        return parse_run(fh, str(path))


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


# --------------------------------------------------------------------------
# folds

def make_folds(query_ids: list[str], k: int, seed: int) -> FoldPlan:
    """Shuffle with ``seed`` and deal round-robin into ``k`` folds."""
    if k < 1:
        raise ValueError("k must be positive")
    ids = sorted(set(query_ids))
    if len(ids) != len(query_ids):
        raise DataError("duplicate query ids")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the number of queries ({len(ids)})")
    random.Random(seed).shuffle(ids)
    return FoldPlan(k, {q: i % k for i, q in enumerate(ids)})
