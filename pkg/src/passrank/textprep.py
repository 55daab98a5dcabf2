"""Tokenization, index-term normalization and query variants."""

from __future__ import annotations

import re
import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable

from nltk.stem.porter import PorterStemmer

from .corpus import Document, TopicQuery

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
RESERVED = (PAD, UNK, CLS, SEP, MASK)
CONT = "##"
MAX_WORD_CHARS = 100

QUERY_KINDS = ("title", "desc", "desc_keywords", "narr", "narr_keywords", "narr_positive")


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P") or unicodedata.category(ch).startswith("S")


def is_punct_token(tok: str) -> bool:
    return bool(tok) and all(_is_punct(c) for c in tok)


def _split_word(word: str) -> list[str]:
    # leading and trailing punctuation is detached one character at a time;
    # word-internal punctuation ("U.S", "o'clock") stays attached
    head = []
    i, j = 0, len(word)
    while i < j and _is_punct(word[i]):
        head.append(word[i])
        i += 1
    tail = []
    while j > i and _is_punct(word[j - 1]):
        tail.append(word[j - 1])
        j -= 1
    core = [word[i:j]] if j > i else []
    return head + core + tail[::-1]


def word_tokenize(text: str) -> list[str]:
    """Whitespace split, then detach leading/trailing punctuation."""
    out = []
    for w in text.split():
        out.extend(_split_word(w))
    return out


def whitespace_words(text: str) -> list[str]:
    """Words as counted by the passage window (punctuation stays attached)."""
    return text.split()


# --------------------------------------------------------------------------
# resources

def _read_list(name: str) -> list[str]:
    text = resources.files("passrank.resources").joinpath(name).read_text(encoding="utf-8")
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]


@lru_cache(maxsize=None)
def stopwords() -> frozenset[str]:
    return frozenset(_read_list("stopwords.txt"))


@lru_cache(maxsize=None)
def negation_markers() -> tuple[str, ...]:
    return tuple(_read_list("negation_markers.txt"))


_stemmer = PorterStemmer(mode=PorterStemmer.ORIGINAL_ALGORITHM)


@lru_cache(maxsize=65536)
def stem(word: str) -> str:
    return _stemmer.stem(word, to_lowercase=False)


def normalize_for_index(words: Iterable[str]) -> list[str]:
    """Lowercase, drop stopwords and punctuation-only tokens, Porter-stem."""
    stops = stopwords()
    out = []
    for w in words:
        w = w.lower()
        if not w or is_punct_token(w) or w in stops:
            continue
        s = stem(w)
        if s and s not in stops:
            out.append(s)
    return out


def index_terms(text: str) -> list[str]:
    return normalize_for_index(word_tokenize(text))


# --------------------------------------------------------------------------
# subword vocabulary

@dataclass(frozen=True)
class SubwordVocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate vocabulary entries")
        for r in RESERVED:
            if r not in self.tokens:
                raise ValueError(f"reserved token {r} missing")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self._ids

    def id(self, tok: str) -> int:
        return self._ids[tok]

    def get(self, tok: str, default=None):
        return self._ids.get(tok, default)

    @property
    def pad_id(self):
        return self._ids[PAD]

    @property
    def unk_id(self):
        return self._ids[UNK]

    @property
    def cls_id(self):
        return self._ids[CLS]

    @property
    def sep_id(self):
        return self._ids[SEP]

    @property
    def mask_id(self):
        return self._ids[MASK]

    def special_ids(self) -> frozenset[int]:
        return frozenset(self._ids[r] for r in RESERVED)

    def convert_ids(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SubwordVocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


def _merge_symbols(left: str, right: str) -> str:
    return left + right[len(CONT):]


def build_subword_vocab(texts: Iterable[str], target_size: int) -> SubwordVocab:
    """Pair-merge vocabulary over word-internal symbol sequences.

    Every word starts as its first character followed by ``##``-prefixed
    continuation characters.  The most frequent adjacent pair is merged
    repeatedly (ties broken by the lexicographically smallest pair) until the
    vocabulary reaches ``target_size`` or no pair is left.
    """
    word_counts: Counter[str] = Counter()
    for text in texts:
        for w in word_tokenize(text.lower()):
            if len(w) <= MAX_WORD_CHARS:
                word_counts[w] += 1
    if not word_counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")

    words = sorted(word_counts)
    seqs = [[w[0]] + [CONT + c for c in w[1:]] for w in words]
    freqs = [word_counts[w] for w in words]
    seen = set(RESERVED)
    for seq in seqs:
        seen.update(seq)
    # reserved first, then initial symbols in sorted order
    vocab = list(RESERVED) + sorted(seen - set(RESERVED))
    if target_size <= len(vocab):
        raise ValueError(
            f"target_size {target_size} too small: {len(vocab)} reserved + character entries"
        )

    pair_counts: Counter[tuple[str, str]] = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, seq in enumerate(seqs):
        for a, b in zip(seq, seq[1:]):
            pair_counts[(a, b)] += freqs[wi]
            where[(a, b)].add(wi)

    while len(vocab) < target_size:
        best = None
        for pair, c in pair_counts.items():
            if c <= 0:
                continue
            if best is None or c > best[1] or (c == best[1] and pair < best[0]):
                best = (pair, c)
        if best is None:
            break
        (a, b), _ = best
        new = _merge_symbols(a, b)
        for wi in sorted(where.pop((a, b), ())):
            seq = seqs[wi]
            f = freqs[wi]
            for p in zip(seq, seq[1:]):
                pair_counts[p] -= f
            merged = []
            i = 0
            while i < len(seq):
                if i + 1 < len(seq) and seq[i] == a and seq[i + 1] == b:
                    merged.append(new)
                    i += 2
                else:
                    merged.append(seq[i])
                    i += 1
            seqs[wi] = merged
            for p in zip(merged, merged[1:]):
                pair_counts[p] += f
                where[p].add(wi)
        pair_counts.pop((a, b), None)
        if new not in seen:
            seen.add(new)
            vocab.append(new)
    return SubwordVocab(tuple(vocab))


def wordpiece_word(word: str, vocab: SubwordVocab) -> list[int]:
    if len(word) > MAX_WORD_CHARS:
        return [vocab.unk_id]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while end > start:
            sub = word[start:end]
            if start > 0:
                sub = CONT + sub
            idx = vocab.get(sub)
            if idx is not None and sub not in RESERVED:
                found = idx
                break
            end -= 1
        if found is None:
            return [vocab.unk_id]
        pieces.append(found)
        start = end
    return pieces


def wordpiece_tokenize(text: str, vocab: SubwordVocab) -> list[int]:
    """Lowercase, word-split, then greedy longest-match-first per word."""
    ids = []
    for w in word_tokenize(text.lower()):
        ids.extend(wordpiece_word(w, vocab))
    return ids


def detokenize_word(pieces: list[str]) -> str:
    return "".join(p[len(CONT):] if p.startswith(CONT) else p for p in pieces)


def document_texts(docs: Iterable[Document]) -> Iterable[str]:
    for d in docs:
        if d.title:
            yield d.title
        yield d.body


# --------------------------------------------------------------------------
# query variants

@dataclass(frozen=True)
class QueryVariant:
    kind: str
    text: str

    def __post_init__(self):
        if self.kind not in QUERY_KINDS:
            raise ValueError(f"unknown query variant kind {self.kind!r}")


def keywords(text: str) -> str:
    """Surface-form keywords: drop stopwords and punctuation, keep case, no stemming."""
    stops = stopwords()
    kept = [t for t in word_tokenize(text) if not is_punct_token(t) and t.lower() not in stops]
    return " ".join(kept)


_SENT_RE = re.compile(r"[^.!?]*(?:[.!?]+|$)")


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENT_RE.findall(text) if s.strip()]


def has_negation(sentence: str) -> bool:
    low = " ".join(word_tokenize(sentence.lower()))
    for marker in negation_markers():
        if re.search(rf"(?<![\w-]){re.escape(marker)}(?![\w-])", low):
            return True
    return False


def positive_narrative(text: str) -> str:
    return " ".join(s for s in split_sentences(text) if not has_negation(s))


def make_query_variant(topic: TopicQuery, kind: str) -> QueryVariant:
    if kind not in QUERY_KINDS:
        raise ValueError(f"unknown query variant kind {kind!r}")
    if kind == "title":
        return QueryVariant(kind, topic.title)
    source = topic.description if kind.startswith("desc") else topic.narrative
    if not source:
        field = "description" if kind.startswith("desc") else "narrative"
        raise ValueError(f"topic {topic.query_id} has no {field} for variant {kind}")
    if kind.endswith("_keywords"):
        return QueryVariant(kind, keywords(source))
    if kind == "narr_positive":
        return QueryVariant(kind, positive_narrative(source))
    return QueryVariant(kind, source)


def variant_word_count(text: str) -> int:
    return sum(1 for t in word_tokenize(text) if not is_punct_token(t))
