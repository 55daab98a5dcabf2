"""Acceptance criteria, one test per criterion.

Each test records a pass/fail line that is printed in the terminal summary
before asserting.  Criteria 9 and 10 run the full desk-scale synthetic
experiments and take a few minutes.
"""

import math
import random
import re
import time

import numpy as np
import pytest

from passrank import corpus as cio
from passrank.corpus import Document, TopicQuery, parse_topics
from passrank.crossenc import (
    Batch,
    EncoderConfig,
    TrainConfig,
    encode_pair,
    forward,
    gradient_check,
    init_params,
    train,
)
from passrank.crossenc.model import forward_batch
from passrank.crossenc.train import evaluate_loss
from passrank.desk import desk_adaptation_config, desk_experiment_config, write_synthetic
from passrank.evaluate import map_at_k, ndcg_at_k, paired_permutation_test, permutation_monte_carlo
from passrank.experiment import ARMS, Collection, audit_leakage, run_adaptation, run_experiment
from passrank.firststage import build_index, retrieve_bm25, retrieve_sdm
from passrank.passage import aggregate_scores, segment_document
from passrank.synthetic import CUE, SyntheticSpec
from passrank.textprep import make_query_variant, negation_markers, variant_word_count
from oracles import (
    brute_ap,
    brute_force_ranking,
    brute_force_scores,
    brute_ndcg,
    brute_permutation_p,
    brute_window_starts,
)
from test_corpus import TOPIC_697

TINY = EncoderConfig(num_layers=1, hidden=8, heads=2, ffn=16, max_len=12, vocab_size=40,
                     max_query_len=4, init_std=0.5, dtype="float64")


def test_c01_gradient_exactness(record_criterion):
    rng = np.random.default_rng(0)
    params = init_params(TINY, 1)
    examples = []
    for i in range(4):
        q = rng.integers(5, 40, rng.integers(1, 4)).tolist()
        p = rng.integers(5, 40, rng.integers(0, 8)).tolist()
        examples.append((encode_pair(q, p, TINY), i % 2))
    t0 = time.perf_counter()
    worst, _ = gradient_check(params, examples, epsilon=1e-5, max_coords=None)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 60
    record_criterion(1, ok, f"max relative gradient error {worst:.2e} (<= 1e-4) in {elapsed:.1f}s (< 60s)")
    assert ok


def test_c02_attention_and_padding(record_criterion):
    cfg = EncoderConfig(num_layers=2, hidden=16, heads=4, ffn=32, max_len=32, vocab_size=50, max_query_len=8)
    params = init_params(cfg, 2)
    rng = np.random.default_rng(2)
    worst_row, worst_pad = 0.0, 0.0
    for _ in range(100):
        q = rng.integers(5, 50, rng.integers(1, 9)).tolist()
        p = rng.integers(5, 50, rng.integers(0, 30)).tolist()
        e = encode_pair(q, p, cfg)
        prob, trace = forward(params, e, capture_attention=True)
        for heads in trace.matrices:
            for m in heads:
                worst_row = max(worst_row, float(np.abs(m.sum(-1) - 1).max()))
        n = e.length
        for _ in range(3):
            S = int(rng.integers(n, cfg.max_len + 1))
            tok = e.token_ids[:S].copy()
            seg = e.segment_ids[:S].copy()
            tok[n:] = rng.integers(0, 50, S - n)
            seg[n:] = rng.integers(0, 2, S - n)
            _, pb, _ = forward_batch(params, Batch(tok[None], seg[None], e.attention_mask[:S][None].astype(bool)))
            worst_pad = max(worst_pad, abs(float(pb[0]) - prob))
    ok = worst_row <= 1e-6 and worst_pad <= 1e-9
    record_criterion(2, ok, f"attention row-sum error {worst_row:.1e} (<= 1e-6); padding drift {worst_pad:.1e} (<= 1e-9)")
    assert ok


def test_c03_segmentation(record_criterion):
    bad = []
    for n in range(1, 1001):
        ps = segment_document(Document("d", " ".join(["w"] * n)), max_passages=None)
        spans = [p.word_span for p in ps]
        expected = max(1, math.ceil((n - 150) / 75) + 1)
        covered = set()
        for s, e in spans:
            covered.update(range(s, e))
        overlap_ok = all(b[0] - a[0] == 75 for a, b in zip(spans, spans[1:]))
        if (len(ps) != expected or [s for s, _ in spans] != brute_window_starts(n, 150, 75)
                or covered != set(range(n)) or not overlap_ok):
            bad.append(n)
    ok = not bad
    record_criterion(3, ok, f"segmentation count/coverage/overlap for lengths 1..1000: {len(bad)} mismatches")
    assert ok


def test_c04_aggregation(record_criterion):
    rng = random.Random(4)
    failures = 0
    for _ in range(1000):
        s = [rng.random() for _ in range(rng.randint(1, 30))]
        first, mx, sm = (aggregate_scores(s, m) for m in ("FirstP", "MaxP", "SumP"))
        direct_sum = 0.0
        for x in s:
            direct_sum += x
        failures += not (first == s[0] and mx == max(s) and abs(sm - direct_sum) <= 1e-12 and mx >= first)
        single = [s[0]]
        failures += len({aggregate_scores(single, m) for m in ("FirstP", "MaxP", "SumP")}) != 1
    ok = failures == 0
    record_criterion(4, ok, f"FirstP/MaxP/SumP on 1000 random lists: {failures} failures")
    assert ok


def test_c05_metrics_oracle(record_criterion):
    rng = random.Random(5)
    worst = 0.0
    for _ in range(1000):
        docs = [f"d{i}" for i in range(rng.randint(1, 30))]
        ranked = rng.sample(docs, rng.randint(0, len(docs)))
        qrels = {("q", d): rng.choice([0, 1, 1, 2, 3]) for d in rng.sample(docs, rng.randint(1, len(docs)))}
        grades = {d: g for (_, d), g in qrels.items()}
        k = rng.randint(1, 40)
        run = [cio.Ranking("q", [(d, float(-i)) for i, d in enumerate(ranked)])]
        for got, want in (
            (ndcg_at_k(run, qrels, k).per_query.get("q"), brute_ndcg(ranked, grades, k)),
            (ndcg_at_k(run, qrels, k, "exp").per_query.get("q"), brute_ndcg(ranked, grades, k, "exp")),
            (map_at_k(run, qrels, k).per_query.get("q"), brute_ap(ranked, grades, k)),
        ):
            worst = max(worst, 0.0 if got is None and want is None else abs(got - want))
    ndcg_hand = ndcg_at_k([cio.Ranking("q", [("a", 3.0), ("b", 2.0), ("c", 1.0)])],
                          {("q", "a"): 1, ("q", "b"): 0, ("q", "c"): 1, ("q", "z"): 1}, 3).mean
    ap_hand = map_at_k([cio.Ranking("q", [("a", 3.0), ("b", 2.0), ("c", 1.0)])],
                       {("q", "a"): 1, ("q", "c"): 1}, 10).mean
    ok = worst <= 1e-9 and abs(ndcg_hand - 0.7039) <= 1e-4 and abs(ap_hand - 0.8333) <= 1e-4
    record_criterion(5, ok, f"metrics vs brute force max diff {worst:.1e}; nDCG hand {ndcg_hand:.4f}, AP hand {ap_hand:.4f}")
    assert ok


def test_c06_permutation_test(record_criterion):
    rng = np.random.default_rng(6)
    a = {str(i): float(x) for i, x in enumerate(rng.uniform(size=12))}
    identical = paired_permutation_test(a, dict(a))
    worst = 0.0
    for n in range(1, 13):
        diffs = rng.normal(0.03, 0.1, n)
        exact = brute_permutation_p(list(diffs))
        via_api = paired_permutation_test({str(i): d for i, d in enumerate(diffs)}, {str(i): 0.0 for i in range(n)})
        mc = permutation_monte_carlo(diffs, 100_000, seed=n)
        worst = max(worst, abs(mc - exact), abs(via_api - exact))
    ok = identical == 1.0 and worst <= 0.02
    record_criterion(6, ok, f"identical inputs p={identical}; Monte-Carlo vs exact (n<=12) max gap {worst:.4f} (<= 0.02)")
    assert ok


def test_c07_first_stage_oracle(record_criterion):
    rng = random.Random(7)
    vocab = ["air", "traffic", "control", "pay", "union", "strike", "radar", "tower", "shift", "wage", "night", "pilot"]
    mismatches = 0
    for trial in range(100):
        docs = [Document(f"d{i:02d}", " ".join(rng.choices(vocab, k=rng.randint(1, 30))))
                for i in range(rng.randint(1, 20))]
        idx = build_index(docs)
        query = " ".join(rng.choices(vocab, k=rng.randint(1, 4)))
        bm = retrieve_bm25(idx, query, k=100)
        want = brute_force_ranking(brute_force_scores(docs, query), 100)
        mismatches += bm.doc_ids() != [d for d, _ in want]
        mismatches += any(abs(a - b) > 1e-9 * max(1, abs(b)) for (_, a), (_, b) in zip(bm.entries, want))
        weights = (0.85, 0.10, 0.05)
        sdm = retrieve_sdm(idx, query, k=100, weights=weights)
        want = brute_force_ranking(brute_force_scores(docs, query, weights=weights), 100)
        mismatches += sdm.doc_ids() != [d for d, _ in want]
        mismatches += retrieve_sdm(idx, query, k=100, weights=(1.0, 0.0, 0.0)).doc_ids() != bm.doc_ids()
    ok = mismatches == 0
    record_criterion(7, ok, f"BM25/SDM vs brute force on 100 random queries (<= 20 docs): {mismatches} mismatches")
    assert ok


def test_c08_overfit(record_criterion):
    cfg = EncoderConfig(dtype="float32")
    rng = np.random.default_rng(8)
    examples = []
    for i in range(32):
        q = rng.integers(5, cfg.vocab_size, 4).tolist()
        p = rng.integers(5, cfg.vocab_size, 40).tolist()
        examples.append((encode_pair(q, p, cfg), i % 2))
    hyper = TrainConfig(steps=500, batch=32, seed=8)
    params, curve = train(init_params(cfg, 8), examples, hyper)
    _, again = train(init_params(cfg, 8), examples, hyper)
    final = evaluate_loss(params, examples)
    ok = final < 0.05 and curve == again
    record_criterion(8, ok, f"training loss after 500 steps {final:.2e} (< 0.05); repeat run identical: {curve == again}")
    assert ok


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("desk")
    return d, write_synthetic(d, SyntheticSpec())


def _needle_layout_ok(coll, cfg):
    # each relevant document holds the answer phrase in exactly one passage, never the first
    docs = {d.doc_id: d for d in coll.docs}
    for (_, doc_id), g in coll.qrels.items():
        if g <= 0:
            continue
        ps = segment_document(docs[doc_id], cfg.passage.window, cfg.passage.stride)
        holders = [p.passage_index for p in ps if " ".join(CUE) in p.text]
        if len(holders) != 1 or holders[0] == 0:
            return False
    return True


def _random_rerank_ndcg(coll, seeds=10):
    # reference point only: shuffling the first-stage candidates at random
    means = []
    for seed in range(seeds):
        rng = random.Random(seed)
        runs = [cio.Ranking(q, [(d, rng.random()) for d in coll.candidates(q, "title").doc_ids()])
                for q in coll.topics]
        means.append(ndcg_at_k(runs, coll.qrels, 20).mean)
    return float(np.mean(means))


@pytest.mark.slow
def test_c09_desk_end_to_end(desk_data, tmp_path, record_criterion):
    d, syn = desk_data
    cfg = desk_experiment_config(d, tmp_path / "work")
    t0 = time.perf_counter()
    coll = Collection.from_config(cfg)
    res = run_experiment(cfg, coll)
    elapsed = time.perf_counter() - t0
    rnd = _random_rerank_ndcg(coll)
    maxp, bow, firstp = (res.per_fold[s]["title"] for s in ("MaxP", "BOW", "FirstP"))
    wins = sum(m > b for m, b in zip(maxp, bow))
    layout = len(syn.docs) >= 500 and len(syn.topics) >= 50 and _needle_layout_ok(syn, cfg)
    ok = layout and wins >= 4 and res.table["MaxP"]["title"] >= res.table["FirstP"]["title"] and elapsed < 1800
    record_criterion(9, ok, (
        f"MaxP > BOW on {wins}/5 folds; nDCG@20 MaxP {res.table['MaxP']['title']:.4f} "
        f"FirstP {res.table['FirstP']['title']:.4f} BOW {res.table['BOW']['title']:.4f} "
        f"(random re-rank {rnd:.4f}); "
        f"{len(syn.docs)} docs/{len(syn.topics)} queries; {elapsed:.0f}s"
    ))
    assert ok


@pytest.mark.slow
def test_c10_adaptation(desk_data, tmp_path, record_criterion):
    d, _ = desk_data
    cfg = desk_adaptation_config(d, tmp_path / "adapt")
    res = run_adaptation(cfg)
    a, c = res.table[ARMS[0]]["ndcg@20"], res.table[ARMS[2]]["ndcg@20"]
    same_candidates = res.candidates[ARMS[0]] == res.candidates[ARMS[1]] == res.candidates[ARMS[2]]
    problems = audit_leakage(cfg.workdir)
    ok = c >= a and same_candidates and not problems
    record_criterion(10, ok, (
        f"nDCG@20 arm c {c:.4f} >= arm a {a:.4f} (arm b {res.table[ARMS[1]]['ndcg@20']:.4f}); "
        f"shared candidates {same_candidates}; leakage problems {len(problems)}"
    ))
    assert ok


def _marker_sentences(text):
    sentences = [s.strip() for s in re.split(r"(?<=[.!?])\s+", text) if s.strip()]
    flagged = [s for s in sentences
               if any(re.search(rf"\b{re.escape(m)}\b", s.lower()) for m in negation_markers())]
    return sentences, flagged


def test_c11_query_variants(desk_data, record_criterion):
    _, syn = desk_data
    topics = list(syn.topics) + parse_topics(TOPIC_697) + [
        TopicQuery("900", "pilot pay", "Is pilot pay rising? Which airlines cut it?",
                   "Reports on wage cuts are relevant. Opinion pieces are irrelevant! Is not about unions.")
    ]
    failures = []
    for t in topics:
        desc_kw = make_query_variant(t, "desc_keywords").text
        if variant_word_count(desc_kw) > variant_word_count(t.description):
            failures.append(f"{t.query_id}: desc_keywords longer than desc")
        sentences, flagged = _marker_sentences(t.narrative)
        expected = " ".join(s for s in sentences if s not in flagged)
        if make_query_variant(t, "narr_positive").text != expected:
            failures.append(f"{t.query_id}: narr_positive mismatch")
    t697 = parse_topics(TOPIC_697)[0]
    removed = "Documents about foreign controllers or individuals are not relevant."
    pos = make_query_variant(t697, "narr_positive").text
    ok = not failures and removed not in pos and removed in " ".join(t697.narrative.split())
    record_criterion(11, ok, f"query variants over {len(topics)} topics: {len(failures)} failures; "
                             f"flagged sentence removed from topic 697: {removed not in pos}")
    assert ok
