"""Cross-validated re-ranking experiments, weak-log adaptation and leakage audit."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import corpus as cio
from .corpus import DataError, Document, FoldPlan, Ranking, TopicQuery
from .crossenc import (
    EncoderConfig,
    EncoderParams,
    InputEncoding,
    SpecialIds,
    TrainConfig,
    encode_pair,
    init_for_finetune,
    init_params,
    pretrain_masked,
    score_encodings,
    train,
)
from .evaluate import MetricReport, evaluate, paired_permutation_test
from .firststage import InvertedIndex, build_index, retrieve_bm25, retrieve_sdm
from .passage import AggregationMode, Passage, aggregate_scores, balance_examples, label_passages, segment_document
from .textprep import (
    SubwordVocab,
    build_subword_vocab,
    document_texts,
    make_query_variant,
    wordpiece_tokenize,
)

log = logging.getLogger(__name__)

SYSTEMS = ("BOW", "SDM", "FirstP", "MaxP", "SumP")
NEURAL = ("FirstP", "MaxP", "SumP")


# ---------------------------------------------------------------------------
# configuration

@dataclass
class FirstStageConfig:
    depth: int = 100
    k1: float = 1.2
    b: float = 0.75
    sdm_weights: tuple[float, float, float] = (0.85, 0.10, 0.05)
    window_o: int = 1
    window_u: int = 8
    analyzer: str = "standard"


@dataclass
class PassageConfig:
    window: int = 150
    stride: int = 75
    prepend_title: bool = False
    max_passages: int = 30
    neg_ratio: int | None = 4


@dataclass
class MetricConfig:
    metric: str = "ndcg"
    k: int = 20
    gain: str = "linear"
    perm_samples: int = 100_000
    extra: list[tuple[str, int]] = field(default_factory=lambda: [("ndcg", 10), ("map", 100)])


@dataclass
class AdaptConfig:
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(steps=300, lr=1e-3))
    weak: TrainConfig = field(default_factory=lambda: TrainConfig(steps=300, lr=1e-3))
    weak_queries: int = 200
    weak_negatives: int = 4
    mode: str = "MaxP"
    mask_rate: float = 0.15


@dataclass
class ExperimentConfig:
    corpus: str
    topics: str
    qrels: str
    workdir: str
    seed: int
    corpus_format: str = "jsonl"
    first_stage: FirstStageConfig = field(default_factory=FirstStageConfig)
    passage: PassageConfig = field(default_factory=PassageConfig)
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(dtype="float32"))
    train: TrainConfig = field(default_factory=TrainConfig)
    modes: list[str] = field(default_factory=lambda: list(NEURAL))
    variants: list[str] = field(default_factory=lambda: ["title"])
    candidates_from: dict[str, str] = field(default_factory=dict)
    folds: int = 5
    metrics: MetricConfig = field(default_factory=MetricConfig)
    score_scale: str = "prob"
    adaptation: AdaptConfig = field(default_factory=AdaptConfig)

    def candidate_variant(self, variant: str) -> str:
        if variant in self.candidates_from:
            return self.candidates_from[variant]
        # narratives re-rank the title's candidates by default
        return "title" if variant.startswith("narr") else variant

    def check_inputs(self) -> None:
        missing = [f"{n}={getattr(self, n)}" for n in ("corpus", "topics", "qrels") if not Path(getattr(self, n)).is_file()]
        if missing:
            raise DataError(f"input files not found: {', '.join(missing)}")

    def to_json(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        return _build(cls, obj)

    @classmethod
    def load(cls, path, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        for ov in overrides:
            apply_override(obj, ov)
        return cls.from_json(obj)


def _build(tp, value):
    if dataclasses.is_dataclass(tp) and isinstance(value, dict):
        hints = {f.name: f for f in dataclasses.fields(tp)}
        unknown = set(value) - set(hints)
        if unknown:
            raise ValueError(f"unknown {tp.__name__} keys: {sorted(unknown)}")
        required = [
            f.name for f in dataclasses.fields(tp)
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
        ]
        absent = [n for n in required if n not in value]
        if absent:
            raise ValueError(f"{tp.__name__} is missing required keys: {absent}")
        kwargs = {}
        for name, val in value.items():
            ftype = _field_type(tp, name)
            kwargs[name] = _build(ftype, val) if ftype is not None else val
        return tp(**kwargs)
    return value


def _field_type(tp, name):
    nested = {
        (ExperimentConfig, "first_stage"): FirstStageConfig,
        (ExperimentConfig, "passage"): PassageConfig,
        (ExperimentConfig, "encoder"): EncoderConfig,
        (ExperimentConfig, "train"): TrainConfig,
        (ExperimentConfig, "metrics"): MetricConfig,
        (ExperimentConfig, "adaptation"): AdaptConfig,
        (AdaptConfig, "pretrain"): TrainConfig,
        (AdaptConfig, "weak"): TrainConfig,
    }
    if (tp, name) in nested:
        return nested[(tp, name)]
    if (tp, name) == (FirstStageConfig, "sdm_weights"):
        return None
    return None


def apply_override(obj: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` to a nested dict; ``value`` is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ValueError(f"override must look like key=value: {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    cur = obj
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value


# ---------------------------------------------------------------------------
# shared data

@dataclass
class WeakLogPair:
    query: str
    doc_id: str
    label: int


class Collection:
    """Everything an experiment needs that does not depend on the fold."""

    def __init__(self, cfg: ExperimentConfig, docs: list[Document], topics: list[TopicQuery], qrels: cio.Judgments):
        self.cfg = cfg
        self.docs = {d.doc_id: d for d in docs}
        self.doc_order = [d.doc_id for d in docs]
        self.qrels = qrels
        judged = {q for q, _ in qrels}
        self.topics = {}
        for t in topics:
            if t.query_id not in judged:
                log.warning("topic %s has no judgments; excluded", t.query_id)
                continue
            self.topics[t.query_id] = t
        if not self.topics:
            raise DataError("no judged topics")
        fs = cfg.first_stage
        self.index: InvertedIndex = build_index(docs, fs.analyzer)
        self.vocab: SubwordVocab = build_subword_vocab(document_texts(docs), cfg.encoder.vocab_size)
        if len(self.vocab) < cfg.encoder.vocab_size:
            log.info("vocabulary saturated at %d entries", len(self.vocab))
        self.specials = SpecialIds.from_vocab(self.vocab)
        self._passages: dict[str, list[Passage]] = {}
        self._passage_ids: dict[tuple[str, int], list[int]] = {}
        self._candidates: dict[tuple[str, str], Ranking] = {}
        self._query_ids: dict[tuple[str, str], list[int]] = {}

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "Collection":
        cfg.check_inputs()
        docs = list(cio.load_corpus(cfg.corpus, cfg.corpus_format))
        return cls(cfg, docs, cio.load_topics(cfg.topics), cio.load_qrels(cfg.qrels))

    def query_text(self, qid: str, variant: str) -> str:
        return make_query_variant(self.topics[qid], variant).text

    def query_ids(self, qid: str, variant: str) -> list[int]:
        key = (qid, variant)
        if key not in self._query_ids:
            self._query_ids[key] = wordpiece_tokenize(self.query_text(qid, variant), self.vocab)
        return self._query_ids[key]

    def passages(self, doc_id: str) -> list[Passage]:
        if doc_id not in self._passages:
            pc = self.cfg.passage
            self._passages[doc_id] = segment_document(
                self.docs[doc_id], pc.window, pc.stride, pc.prepend_title, pc.max_passages
            )
        return self._passages[doc_id]

    def passage_ids(self, p: Passage) -> list[int]:
        key = (p.doc_id, p.passage_index)
        if key not in self._passage_ids:
            self._passage_ids[key] = wordpiece_tokenize(p.text, self.vocab)
        return self._passage_ids[key]

    def candidates(self, qid: str, variant: str) -> Ranking:
        """BM25 top-``depth`` for the variant's candidate source."""
        source = self.cfg.candidate_variant(variant)
        key = (qid, source)
        if key not in self._candidates:
            fs = self.cfg.first_stage
            try:
                self._candidates[key] = retrieve_bm25(
                    self.index, self.query_text(qid, source), fs.depth, k1=fs.k1, b=fs.b, query_id=qid
                )
            except ValueError:
                log.warning("query %s (%s) has no index terms; empty candidate list", qid, source)
                self._candidates[key] = Ranking(qid, [], "BOW")
        return self._candidates[key]

    def sdm(self, qid: str, variant: str) -> Ranking:
        fs = self.cfg.first_stage
        try:
            return retrieve_sdm(
                self.index, self.query_text(qid, variant), fs.depth, tuple(fs.sdm_weights),
                fs.window_o, fs.window_u, k1=fs.k1, b=fs.b, query_id=qid,
            )
        except ValueError:
            return Ranking(qid, [], "SDM")

    def bow(self, qid: str, variant: str) -> Ranking:
        fs = self.cfg.first_stage
        try:
            r = retrieve_bm25(self.index, self.query_text(qid, variant), fs.depth, k1=fs.k1, b=fs.b, query_id=qid)
        except ValueError:
            r = Ranking(qid, [], "BOW")
        return r

    def encode(self, query_ids: list[int], p: Passage) -> InputEncoding:
        return encode_pair(query_ids, self.passage_ids(p), self.cfg.encoder, self.specials)

    def is_relevant(self, qid: str, doc_id: str) -> bool:
        return self.qrels.get((qid, doc_id), 0) > 0


# ---------------------------------------------------------------------------
# fold-level training and re-ranking

def training_examples(
    coll: Collection, train_qids: Iterable[str], variant: str, seed: int
) -> tuple[list[tuple[InputEncoding, int]], list[dict]]:
    """(encoding, label) pairs from training queries' candidates, plus an audit record per pair."""
    raw = []
    for q in sorted(train_qids):
        for doc_id in coll.candidates(q, variant).doc_ids():
            for p in label_passages(coll.passages(doc_id), coll.is_relevant(q, doc_id)):
                raw.append((q, p))
    kept = balance_examples(raw, coll.cfg.passage.neg_ratio, seed)
    examples, audit = [], []
    for q, p in kept:
        examples.append((coll.encode(coll.query_ids(q, variant), p), int(p.label)))
        audit.append({"query_id": q, "doc_id": p.doc_id, "passage_index": p.passage_index, "label": p.label})
    return examples, audit


def score_candidates(
    coll: Collection, params: EncoderParams, qids: Iterable[str], variant: str, modes: Sequence[str]
) -> dict[str, dict[str, Ranking]]:
    """Per-mode re-ranked candidate lists for ``qids``."""
    encs, keys = [], []
    qids = sorted(qids)
    for q in qids:
        qt = coll.query_ids(q, variant)
        for doc_id in coll.candidates(q, variant).doc_ids():
            for p in coll.passages(doc_id):
                encs.append(coll.encode(qt, p))
                keys.append((q, doc_id))
    scores = score_encodings(params, encs, logits=coll.cfg.score_scale == "logit") if encs else np.array([])
    per_doc: dict[tuple[str, str], list[float]] = {}
    for key, s in zip(keys, scores):
        per_doc.setdefault(key, []).append(float(s))
    out: dict[str, dict[str, Ranking]] = {m: {} for m in modes}
    for q in qids:
        cands = coll.candidates(q, variant)
        for m in modes:
            if not cands.entries:
                out[m][q] = Ranking(q, [], m)
                continue
            entries = [(d, aggregate_scores(per_doc[(q, d)], m)) for d in cands.doc_ids()]
            out[m][q] = Ranking(q, entries, m)
    return out


def _write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    cio.atomic_write_text(path, "".join(json.dumps(r) + "\n" for r in rows))


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(cfg: ExperimentConfig, workdir: Path, kind: str, outputs: list[str]) -> None:
    inputs = {}
    for name in ("corpus", "topics", "qrels"):
        path = getattr(cfg, name)
        inputs[name] = {"path": str(path), "sha256": _sha256(path)}
    # one entry per run kind, so an experiment and an adaptation can share a workdir
    path = workdir / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest[kind] = {
        "inputs": inputs,
        "config": cfg.to_json(),
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "outputs": sorted(outputs),
    }
    cio.atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


@dataclass
class ExperimentResult:
    table: dict[str, dict[str, float]]  # system -> variant -> mean
    per_fold: dict[str, dict[str, list[float]]]  # system -> variant -> fold means
    reports: dict[tuple[str, str], MetricReport]
    p_values: dict[str, dict[str, float]]  # system -> variant -> p vs SDM
    folds: FoldPlan

    def to_json(self) -> dict:
        return {
            "table": self.table,
            "per_fold": self.per_fold,
            "p_values_vs_SDM": self.p_values,
            "folds": self.folds.to_json(),
        }

    def to_text(self, metric_name: str) -> str:
        variants = list(next(iter(self.table.values())).keys())
        w = max(8, *(len(v) for v in variants))
        lines = [f"{metric_name:<8} " + " ".join(f"{v:>{w}}" for v in variants)]
        for system, row in self.table.items():
            cells = []
            for v in variants:
                p = self.p_values.get(system, {}).get(v)
                mark = "*" if p is not None and p < 0.05 else " "
                cells.append(f"{row[v]:>{w - 1}.4f}{mark}")
            lines.append(f"{system:<8} " + " ".join(cells))
        return "\n".join(lines) + "\n"


def _fold_means(report: MetricReport, folds: FoldPlan) -> list[float]:
    out = []
    for i in range(folds.k):
        vals = [report.per_query[q] for q in folds.fold(i) if q in report.per_query]
        out.append(float(np.mean(vals)) if vals else 0.0)
    return out


def _train_seed(cfg: ExperimentConfig, fold: int, salt: int = 0) -> int:
    return cfg.seed * 1000 + fold * 10 + salt


def run_experiment(cfg: ExperimentConfig, coll: Collection | None = None) -> ExperimentResult:
    """Cross-validated BOW/SDM/FirstP/MaxP/SumP comparison over query variants."""
    coll = coll or Collection.from_config(cfg)
    work = Path(cfg.workdir)
    work.mkdir(parents=True, exist_ok=True)
    folds = cio.make_folds(sorted(coll.topics), cfg.folds, cfg.seed)
    cio.atomic_write_text(work / "folds.json", json.dumps(folds.to_json(), indent=2) + "\n")
    coll.vocab.save(work / "vocab.txt")
    outputs = ["folds.json", "vocab.txt"]
    mc = cfg.metrics
    modes = [AggregationMode(m).value for m in cfg.modes]
    systems = ["BOW", "SDM", *modes]

    table: dict[str, dict[str, float]] = {s: {} for s in systems}
    per_fold: dict[str, dict[str, list[float]]] = {s: {} for s in systems}
    reports = {}
    p_values: dict[str, dict[str, float]] = {s: {} for s in modes}

    for variant in cfg.variants:
        vdir = work / "runs" / variant
        vdir.mkdir(parents=True, exist_ok=True)
        (work / "train_pairs").mkdir(exist_ok=True)
        merged: dict[str, list[Ranking]] = {s: [] for s in systems}
        for i in range(folds.k):
            test_q = folds.fold(i)
            fold_runs = {
                "BOW": [coll.bow(q, variant) for q in test_q],
                "SDM": [coll.sdm(q, variant) for q in test_q],
            }
            examples, audit = training_examples(coll, folds.train_queries(i), variant, _train_seed(cfg, i))
            pair_path = work / "train_pairs" / f"{variant}.fold{i}.jsonl"
            _write_jsonl(pair_path, audit)
            outputs.append(str(pair_path.relative_to(work)))
            params = init_params(cfg.encoder, _train_seed(cfg, i, 1))
            hp = dataclasses.replace(cfg.train, seed=_train_seed(cfg, i, 2))
            log.info("variant %s fold %d: %d training passages", variant, i, len(examples))
            params, losses = train(params, examples, hp)
            log.info("variant %s fold %d: final loss %.4f", variant, i, losses[-1] if losses else float("nan"))
            ranked = score_candidates(coll, params, test_q, variant, modes)
            for m in modes:
                fold_runs[m] = [ranked[m][q] for q in test_q]
            for s in systems:
                runs = [dataclasses.replace(r, run_tag=s) for r in fold_runs[s]]
                path = vdir / f"{s}.fold{i}.run"
                cio.write_run(runs, path)
                outputs.append(str(path.relative_to(work)))
                merged[s].extend(runs)
        for s in systems:
            path = vdir / f"{s}.run"
            cio.write_run(merged[s], path)
            outputs.append(str(path.relative_to(work)))
            rep = evaluate(merged[s], coll.qrels, mc.metric, mc.k, mc.gain)
            reports[(s, variant)] = rep
            table[s][variant] = rep.mean
            per_fold[s][variant] = _fold_means(rep, folds)
        base = reports[("SDM", variant)].per_query
        for m in modes:
            p_values[m][variant] = paired_permutation_test(
                reports[(m, variant)].per_query, base, mc.perm_samples, cfg.seed
            )

    result = ExperimentResult(table, per_fold, reports, p_values, folds)
    cio.atomic_write_text(work / "results.json", json.dumps(result.to_json(), indent=2) + "\n")
    cio.atomic_write_text(work / "results.txt", result.to_text(f"{mc.metric}@{mc.k}"))
    outputs += ["results.json", "results.txt"]
    write_manifest(cfg, work, "experiment", outputs)
    return result


# ---------------------------------------------------------------------------
# weak-log adaptation

def synthesize_weak_log(
    docs: Sequence[Document],
    index: InvertedIndex,
    n_queries: int,
    negatives_per_query: int,
    seed: int,
) -> list[WeakLogPair]:
    """Title-as-query pseudo labels: the titled document is the positive,
    the best BM25 matches for its title (excluding itself) are negatives.

    Each distinct title is used as a pseudo-query at most once, and documents
    sharing the source's exact title are never drawn as its negatives.
    """
    if negatives_per_query < 1:
        raise ValueError("need at least one negative per query")
    titled = [d for d in docs if d.title and d.title.strip()]
    if not titled:
        raise DataError("weak-log synthesis needs titled documents")
    rng = random.Random(seed)
    order = list(titled)
    rng.shuffle(order)
    sources: list[Document] = []
    used: set[str] = set()
    for d in order:
        if d.title not in used:
            used.add(d.title)
            sources.append(d)
        if len(sources) == n_queries:
            break
    if len(sources) < n_queries:
        raise DataError(f"only {len(sources)} distinct titles for {n_queries} pseudo-queries")
    same_title: dict[str, set[str]] = {}
    for d in titled:
        same_title.setdefault(d.title, set()).add(d.doc_id)
    all_ids = [d.doc_id for d in docs]
    pairs: list[WeakLogPair] = []
    for d in sources:
        excluded = same_title[d.title]
        if len(all_ids) - len(excluded) < negatives_per_query:
            raise DataError(f"not enough documents for {negatives_per_query} negatives")
        try:
            hits = retrieve_bm25(index, d.title, negatives_per_query + len(excluded)).doc_ids()
        except ValueError:
            hits = []
        negs = [h for h in hits if h not in excluded][:negatives_per_query]
        while len(negs) < negatives_per_query:
            extra = rng.choice(all_ids)
            if extra not in excluded and extra not in negs:
                negs.append(extra)
        pairs.append(WeakLogPair(d.title, d.doc_id, 1))
        pairs.extend(WeakLogPair(d.title, n, 0) for n in negs)
    return pairs


def weak_log_examples(coll: Collection, pairs: Sequence[WeakLogPair]) -> list[tuple[InputEncoding, int]]:
    out = []
    for pr in pairs:
        q = wordpiece_tokenize(pr.query, coll.vocab)
        if not q:
            continue
        for p in coll.passages(pr.doc_id):
            out.append((coll.encode(q, p), pr.label))
    return out


def pretraining_sequences(coll: Collection) -> list[list[int]]:
    seqs = []
    for d in coll.doc_order:
        for p in coll.passages(d):
            ids = coll.passage_ids(p)
            if ids:
                seqs.append(ids)
    return seqs


@dataclass
class AdaptationResult:
    table: dict[str, dict[str, float]]  # arm -> metric name -> mean
    p_values: dict[str, float]  # "a|b" -> p on the primary metric
    per_fold: dict[str, list[float]]
    folds: FoldPlan
    candidates: dict[str, dict[str, list[str]]]  # arm -> query -> candidate doc ids
    encoder_digests: dict[str, str]

    def to_json(self) -> dict:
        return {
            "table": self.table,
            "p_values": self.p_values,
            "per_fold": self.per_fold,
            "folds": self.folds.to_json(),
            "encoder_digests": self.encoder_digests,
        }

    def to_text(self) -> str:
        metrics = list(next(iter(self.table.values())).keys())
        lines = [f"{'arm':<26} " + " ".join(f"{m:>9}" for m in metrics)]
        for arm, row in self.table.items():
            lines.append(f"{arm:<26} " + " ".join(f"{row[m]:>9.4f}" for m in metrics))
        for k, p in self.p_values.items():
            lines.append(f"p({k}) = {p:.4f}")
        return "\n".join(lines) + "\n"


def params_digest(params: EncoderParams, keys: Iterable[str]) -> str:
    h = hashlib.sha256()
    for k in sorted(keys):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params.tensors[k]).tobytes())
    return h.hexdigest()


ARMS = ("a:random-init", "b:pretrain", "c:pretrain+weaklog")


def run_adaptation(cfg: ExperimentConfig, coll: Collection | None = None) -> AdaptationResult:
    """Three-arm knowledge-stacking comparison on identical folds and candidates.

    (a) fine-tune from random initialisation; (b) masked-token pretraining then
    fine-tuning; (c) masked-token pretraining, weak-log training, then
    fine-tuning.
    """
    coll = coll or Collection.from_config(cfg)
    ac = cfg.adaptation
    work = Path(cfg.workdir)
    work.mkdir(parents=True, exist_ok=True)
    folds = cio.make_folds(sorted(coll.topics), cfg.folds, cfg.seed)
    cio.atomic_write_text(work / "folds.json", json.dumps(folds.to_json(), indent=2) + "\n")
    outputs = ["folds.json"]
    variant = cfg.variants[0]
    mode = AggregationMode(ac.mode).value
    mc = cfg.metrics

    seqs = pretraining_sequences(coll)
    pre_hp = dataclasses.replace(ac.pretrain, seed=_train_seed(cfg, 0, 3))
    log.info("masked-token pretraining on %d sequences", len(seqs))
    pretrained, _ = pretrain_masked(
        cfg.encoder, seqs, pre_hp, ac.mask_rate, coll.specials, init=init_params(cfg.encoder, cfg.seed)
    )
    weak_pairs = synthesize_weak_log(
        [coll.docs[d] for d in coll.doc_order], coll.index, ac.weak_queries, ac.weak_negatives, cfg.seed
    )
    _write_jsonl(work / "weaklog.jsonl", (asdict(p) for p in weak_pairs))
    outputs.append("weaklog.jsonl")
    weak_examples = weak_log_examples(coll, weak_pairs)
    log.info("weak-log stage on %d passages", len(weak_examples))
    weak_init = init_for_finetune(pretrained, _train_seed(cfg, 0, 4))
    weak_params, _ = train(weak_init, weak_examples, dataclasses.replace(ac.weak, seed=_train_seed(cfg, 0, 5)))

    enc_keys = [k for k in pretrained.tensors if not k.startswith("head.")]
    digests = {
        ARMS[1]: params_digest(pretrained, enc_keys),
        ARMS[2]: params_digest(weak_params, enc_keys),
    }

    merged: dict[str, list[Ranking]] = {a: [] for a in ARMS}
    cands: dict[str, dict[str, list[str]]] = {a: {} for a in ARMS}
    (work / "train_pairs").mkdir(exist_ok=True)
    rdir = work / "runs" / "adapt"
    rdir.mkdir(parents=True, exist_ok=True)
    for i in range(folds.k):
        test_q = folds.fold(i)
        examples, audit = training_examples(coll, folds.train_queries(i), variant, _train_seed(cfg, i))
        pair_path = work / "train_pairs" / f"adapt.fold{i}.jsonl"
        _write_jsonl(pair_path, audit)
        outputs.append(str(pair_path.relative_to(work)))
        hp = dataclasses.replace(cfg.train, seed=_train_seed(cfg, i, 2))
        head_seed = _train_seed(cfg, i, 1)
        starts = {
            ARMS[0]: init_params(cfg.encoder, head_seed),
            ARMS[1]: init_for_finetune(pretrained, head_seed),
            # the weak-log head already encodes search knowledge; it is kept
            ARMS[2]: weak_params,
        }
        for arm, start in starts.items():
            params, _ = train(start, examples, hp)
            ranked = score_candidates(coll, params, test_q, variant, [mode])[mode]
            runs = [dataclasses.replace(ranked[q], run_tag=arm.split(":")[0]) for q in test_q]
            path = rdir / f"{arm.split(':')[0]}.fold{i}.run"
            cio.write_run(runs, path)
            outputs.append(str(path.relative_to(work)))
            merged[arm].extend(runs)
            for q in test_q:
                cands[arm][q] = coll.candidates(q, variant).doc_ids()

    metric_list = [(mc.metric, mc.k), *[tuple(m) for m in mc.extra]]
    table: dict[str, dict[str, float]] = {}
    primary: dict[str, MetricReport] = {}
    per_fold = {}
    for arm in ARMS:
        row = {}
        for name, k in metric_list:
            rep = evaluate(merged[arm], coll.qrels, name, k, mc.gain)
            row[f"{name}@{k}"] = rep.mean
            if (name, k) == (mc.metric, mc.k):
                primary[arm] = rep
        table[arm] = row
        per_fold[arm] = _fold_means(primary[arm], folds)
        path = rdir / f"{arm.split(':')[0]}.run"
        cio.write_run(merged[arm], path)
        outputs.append(str(path.relative_to(work)))
    p_values = {}
    for x in range(len(ARMS)):
        for y in range(x + 1, len(ARMS)):
            a, b = ARMS[x], ARMS[y]
            p_values[f"{a.split(':')[0]}|{b.split(':')[0]}"] = paired_permutation_test(
                primary[a].per_query, primary[b].per_query, mc.perm_samples, cfg.seed
            )
    result = AdaptationResult(table, p_values, per_fold, folds, cands, digests)
    cio.atomic_write_text(work / "adapt_results.json", json.dumps(result.to_json(), indent=2) + "\n")
    cio.atomic_write_text(work / "adapt_results.txt", result.to_text())
    outputs += ["adapt_results.json", "adapt_results.txt"]
    write_manifest(cfg, work, "adaptation", outputs)
    return result


# ---------------------------------------------------------------------------
# leakage audit

def audit_leakage(workdir) -> list[str]:
    """Re-derive fold membership from emitted artifacts and report violations.

    Checks that no training pair of fold ``i`` belongs to a query held out in
    fold ``i``, that every fold run file covers exactly its held-out queries,
    and that every query is evaluated exactly once across folds.
    """
    work = Path(workdir)
    folds = FoldPlan.from_json(json.loads((work / "folds.json").read_text()))
    problems = []
    for pair_file in sorted((work / "train_pairs").glob("*.fold*.jsonl")):
        fold = int(pair_file.stem.rsplit("fold", 1)[1])
        test = set(folds.fold(fold))
        with open(pair_file, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                q = json.loads(line)["query_id"]
                if q in test:
                    problems.append(f"{pair_file.name}:{lineno}: held-out query {q} used for training")
    seen: dict[tuple[str, str], dict[str, int]] = {}
    for run_file in sorted((work / "runs").glob("*/*.fold*.run")):
        fold = int(run_file.stem.rsplit("fold", 1)[1])
        key = (run_file.parent.name, run_file.stem.rsplit(".", 1)[0])
        qs = {r.query_id for r in cio.read_run(run_file)}
        if not qs <= set(folds.fold(fold)):
            problems.append(f"{run_file}: queries outside fold {fold}: {sorted(qs - set(folds.fold(fold)))}")
        counts = seen.setdefault(key, {})
        for q in qs:
            counts[q] = counts.get(q, 0) + 1
    for key, counts in seen.items():
        dup = [q for q, c in counts.items() if c > 1]
        if dup:
            problems.append(f"{key}: queries evaluated more than once: {sorted(dup)}")
    return problems
