"""Synthetic "needle" collection for desk-scale experiments.

Each query owns two topic terms.  Its relevant documents carry an answer
phrase ``<t1> <t2> answer documented here`` inside the part of the body that
only the second passage covers, so the leading passage holds no evidence.
Distractor documents repeat the topic terms more often than the relevant
documents do but never carry the answer phrase, which keeps a bag-of-words
ranker below the relevant documents.  Confuser documents mention the topic
terms of one query while carrying the answer phrase of another.  Mention
documents use a single topic term once; they fill the candidate pool so that
shuffling the first-stage candidates at random scores below the lexical
ranking.  Every document title is drawn from its own content.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .corpus import Document, Judgments, TopicQuery

CUE = ("answer", "documented", "here")
_CONS = "bdfgklmnprstvz"
_VOW = "aeiou"


@dataclass(frozen=True)
class SyntheticSpec:
    n_queries: int = 60
    relevant_per_query: int = 3
    distractors_per_query: int = 4
    confusers_per_query: int = 1
    mentions_per_query: int = 12
    background_docs: int = 100
    window: int = 40
    stride: int = 20
    distractor_tf: int = 4
    seed: int = 13

    @property
    def doc_words(self) -> int:
        # two passages: [0, window) and [stride, window + stride)
        return self.window + self.stride


@dataclass
class SyntheticCollection:
    docs: list[Document]
    topics: list[TopicQuery]
    qrels: Judgments
    needle_spans: dict[str, tuple[int, int]]


def _pseudo_words(rng: random.Random, n: int, syllables: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        w = "".join(rng.choice(_CONS) + rng.choice(_VOW) for _ in range(syllables))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def make_collection(spec: SyntheticSpec = SyntheticSpec()) -> SyntheticCollection:
    rng = random.Random(spec.seed)
    taken = set(CUE)
    filler = _pseudo_words(rng, 400, 2, taken)
    topic_terms = _pseudo_words(rng, 2 * spec.n_queries, 3, taken)
    L = spec.doc_words
    needle_len = 2 + len(CUE)
    if spec.stride < needle_len:
        raise ValueError("stride too small to hold the answer phrase in one passage")

    docs: list[Document] = []
    qrels: Judgments = {}
    spans: dict[str, tuple[int, int]] = {}
    topics: list[TopicQuery] = []

    def body_with(inserts: list[tuple[int, list[str]]]) -> list[str]:
        words = [rng.choice(filler) for _ in range(L)]
        for pos, seq in inserts:
            words[pos:pos + len(seq)] = seq
        return words

    fillers = set(filler)

    def title_from(body: list[str]) -> str:
        # titles summarize their own document: two filler words it contains
        return " ".join(rng.sample(sorted({w for w in body if w in fillers}), 2))

    def needle_insert(t1, t2):
        # strictly inside [window, window + stride): only the last passage sees it
        pos = rng.randint(spec.window, L - needle_len)
        return pos, [t1, t2, *CUE]

    qids = [f"{101 + i}" for i in range(spec.n_queries)]
    terms = {q: (topic_terms[2 * i], topic_terms[2 * i + 1]) for i, q in enumerate(qids)}
    for q in qids:
        t1, t2 = terms[q]
        topics.append(TopicQuery(
            q,
            f"{t1} {t2}",
            f"What do the reports say about the {t1} {t2}?",
            f"Relevant documents state the {t1} {t2} answer. "
            f"Documents that only mention {t1} or {t2} are not relevant.",
        ))

    n = 0

    def new_id():
        nonlocal n
        n += 1
        return f"D{n:05d}"

    for qi, q in enumerate(qids):
        t1, t2 = terms[q]
        for _ in range(spec.relevant_per_query):
            pos, seq = needle_insert(t1, t2)
            d = new_id()
            docs.append(Document(d, " ".join(body_with([(pos, seq)])), f"{t1} {t2}"))
            qrels[(q, d)] = 1
            spans[d] = (pos, pos + len(seq))
        for _ in range(spec.distractors_per_query):
            slots = rng.sample(range(spec.window - 1), spec.distractor_tf)
            ins = [(p, [t1 if j % 2 == 0 else t2]) for j, p in enumerate(slots)]
            ins += [(p, [t2 if j % 2 == 0 else t1]) for j, p in
                    enumerate(rng.sample([s for s in range(spec.window, L) if s not in slots], spec.distractor_tf))]
            d = new_id()
            body = body_with(ins)
            docs.append(Document(d, " ".join(body), title_from(body)))
            qrels[(q, d)] = 0
        for _ in range(spec.confusers_per_query):
            other = qids[(qi + 1 + rng.randrange(len(qids) - 1)) % len(qids)]
            o1, o2 = terms[other]
            pos, seq = needle_insert(o1, o2)
            slots = rng.sample(range(spec.window - 2), 2)
            ins = [(slots[0], [t1]), (slots[1], [t2]), (pos, seq)]
            d = new_id()
            docs.append(Document(d, " ".join(body_with(ins)), f"{o1} {o2}"))
            qrels[(other, d)] = 1
            qrels[(q, d)] = 0
            spans[d] = (pos, pos + len(seq))
        for j in range(spec.mentions_per_query):
            # a single passing mention of one topic term, anywhere in the body
            d = new_id()
            body = body_with([(rng.randrange(L), [(t1, t2)[j % 2]])])
            docs.append(Document(d, " ".join(body), title_from(body)))
            qrels[(q, d)] = 0
    for _ in range(spec.background_docs):
        d = new_id()
        body = body_with([])
        docs.append(Document(d, " ".join(body), title_from(body)))
    return SyntheticCollection(docs, topics, qrels, spans)
