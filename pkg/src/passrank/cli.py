"""Command-line entry point: ``passrank <subcommand>``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import corpus as cio
from .corpus import DataError
from .crossenc import (
    EncoderParams,
    NumericError,
    SpecialIds,
    encode_pair,
    forward,
    init_params,
    load_params,
    save_params,
    train,
)
from .evaluate import evaluate, paired_permutation_test
from .experiment import (
    Collection,
    ExperimentConfig,
    apply_override,
    audit_leakage,
    run_adaptation,
    run_experiment,
    score_candidates,
    synthesize_weak_log,
    training_examples,
)
from .firststage import InvertedIndex, build_index, retrieve_bm25, retrieve_sdm
from .passage import label_passages, segment_document, write_passages
from .textprep import SubwordVocab, make_query_variant, wordpiece_tokenize

log = logging.getLogger("passrank")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _weights(text: str) -> tuple[float, float, float]:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated weights")
    return tuple(parts)


# ---------------------------------------------------------------------------
# attention trace

def export_attention_trace(
    params: EncoderParams, vocab: SubwordVocab, query: str, passage: str, out_path
) -> dict:
    """Write per-layer/per-head attention over the unmasked tokens as JSON."""
    q = wordpiece_tokenize(query, vocab)
    p = wordpiece_tokenize(passage, vocab)
    enc = encode_pair(q, p, params.config, SpecialIds.from_vocab(vocab))
    tokens = vocab.convert_ids(enc.token_ids[: enc.length])
    prob, trace = forward(params, enc, capture_attention=True, token_strings=tokens)
    obj = {
        "query": query,
        "passage": passage,
        "probability": prob,
        "truncated": bool(enc.truncated),
        "num_layers": params.config.num_layers,
        "num_heads": params.config.heads,
        **trace.to_json(),
    }
    cio.atomic_write_text(out_path, json.dumps(obj) + "\n")
    return obj


# ---------------------------------------------------------------------------
# subcommands

def _load_config(args) -> ExperimentConfig:
    obj = json.loads(Path(args.config).read_text(encoding="utf-8"))
    flag_map = {
        "workdir": "workdir", "seed": "seed",
        "k1": "first_stage.k1", "b": "first_stage.b", "depth": "first_stage.depth",
        "window": "passage.window", "stride": "passage.stride", "neg_ratio": "passage.neg_ratio",
        "metric": "metrics.metric", "k": "metrics.k", "gain": "metrics.gain",
        "perm_samples": "metrics.perm_samples",
    }
    for attr, key in flag_map.items():
        val = getattr(args, attr, None)
        if val is not None:
            apply_override(obj, f"{key}={json.dumps(val)}")
    if getattr(args, "sdm_weights", None) is not None:
        apply_override(obj, f"first_stage.sdm_weights={json.dumps(list(args.sdm_weights))}")
    if getattr(args, "prepend_title", False):
        apply_override(obj, "passage.prepend_title=true")
    if getattr(args, "candidates_from", None):
        for spec in args.candidates_from:
            v, _, src = spec.partition("=")
            obj.setdefault("candidates_from", {})[v] = src
    for ov in args.set or ():
        apply_override(obj, ov)
    try:
        cfg = ExperimentConfig.from_json(obj)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    for name in ("corpus", "topics", "qrels"):
        if not Path(getattr(cfg, name)).exists():
            raise DataError(f"{name} path does not exist: {getattr(cfg, name)}")
    return cfg


def cmd_index(args):
    idx = build_index(cio.load_corpus(args.corpus, args.format), args.analyzer)
    idx.save(args.out)
    log.info("indexed %d documents, %d terms", idx.doc_count, len(idx.postings))


def cmd_retrieve(args):
    idx = InvertedIndex.load(args.index)
    runs = []
    for t in cio.load_topics(args.topics):
        text = make_query_variant(t, args.variant).text
        try:
            if args.model == "sdm":
                r = retrieve_sdm(idx, text, args.depth, args.sdm_weights, args.window_o, args.window_u,
                                 k1=args.k1, b=args.b, query_id=t.query_id)
            else:
                r = retrieve_bm25(idx, text, args.depth, k1=args.k1, b=args.b, query_id=t.query_id)
        except ValueError:
            log.warning("topic %s: no index terms in %s variant", t.query_id, args.variant)
            continue
        runs.append(dataclasses.replace(r, run_tag=args.tag or r.run_tag))
    cio.write_run(runs, args.out)


def cmd_segment(args):
    qrels = cio.load_qrels(args.qrels) if args.qrels else None
    out = []
    for doc in cio.load_corpus(args.corpus, args.format):
        ps = segment_document(doc, args.window, args.stride, args.prepend_title, args.max_passages)
        if qrels is not None and args.query_id:
            ps = label_passages(ps, qrels.get((args.query_id, doc.doc_id), 0) > 0)
        out.extend(ps)
    write_passages(out, args.out)


def cmd_train(args):
    cfg = _load_config(args)
    coll = Collection.from_config(cfg)
    qids = args.queries.split(",") if args.queries else sorted(coll.topics)
    examples, _ = training_examples(coll, qids, args.variant, cfg.seed)
    params = init_params(cfg.encoder, cfg.seed)
    params, losses = train(params, examples, dataclasses.replace(cfg.train, seed=cfg.seed))
    save_params(params, args.out)
    coll.vocab.save(Path(args.out).with_suffix(".vocab.txt"))
    log.info("trained on %d passages; final loss %.4f", len(examples), losses[-1] if losses else float("nan"))


def cmd_rerank(args):
    cfg = _load_config(args)
    coll = Collection.from_config(cfg)
    params = load_params(args.checkpoint)
    qids = args.queries.split(",") if args.queries else sorted(coll.topics)
    ranked = score_candidates(coll, params, qids, args.variant, [args.mode])[args.mode]
    cio.write_run([ranked[q] for q in qids], args.out)


def cmd_eval(args):
    qrels = cio.load_qrels(args.qrels)
    runs = cio.read_run(args.run)
    rep = evaluate(runs, qrels, args.metric, args.k, args.gain)
    out = rep.to_json()
    if args.baseline:
        base = evaluate(cio.read_run(args.baseline), qrels, args.metric, args.k, args.gain)
        common = set(rep.per_query) & set(base.per_query)
        out["p_value_vs_baseline"] = paired_permutation_test(
            {q: rep.per_query[q] for q in common}, {q: base.per_query[q] for q in common},
            args.perm_samples, args.seed,
        )
    if args.format == "json":
        sys.stdout.write(json.dumps(out, indent=2) + "\n")
    else:
        sys.stdout.write(rep.to_text())
        if "p_value_vs_baseline" in out:
            sys.stdout.write(f"p-value vs baseline: {out['p_value_vs_baseline']:.4f}\n")


def cmd_experiment(args):
    cfg = _load_config(args)
    res = run_experiment(cfg)
    sys.stdout.write(res.to_text(f"{cfg.metrics.metric}@{cfg.metrics.k}"))
    problems = audit_leakage(cfg.workdir)
    if problems:
        raise DataError("leakage audit failed:\n" + "\n".join(problems))


def cmd_adapt(args):
    cfg = _load_config(args)
    res = run_adaptation(cfg)
    sys.stdout.write(res.to_text())
    problems = audit_leakage(cfg.workdir)
    if problems:
        raise DataError("leakage audit failed:\n" + "\n".join(problems))


def cmd_trace(args):
    params = load_params(args.checkpoint)
    vocab = SubwordVocab.load(args.vocab)
    obj = export_attention_trace(params, vocab, args.query, args.passage, args.out)
    if obj["truncated"]:
        log.warning("input truncated to %d tokens", params.config.max_len)


def cmd_weaklog(args):
    docs = list(cio.load_corpus(args.corpus, args.format))
    idx = build_index(docs)
    pairs = synthesize_weak_log(docs, idx, args.n_queries, args.negatives, args.seed)
    cio.atomic_write_text(args.out, "".join(json.dumps(dataclasses.asdict(p)) + "\n" for p in pairs))


def cmd_audit(args):
    problems = audit_leakage(args.workdir)
    for p in problems:
        sys.stdout.write(p + "\n")
    if problems:
        raise DataError(f"{len(problems)} leakage problems")
    sys.stdout.write("leakage audit passed\n")


def _add_config_flags(p):
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--workdir")
    p.add_argument("--seed", type=int)
    p.add_argument("--k1", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--sdm-weights", type=_weights)
    p.add_argument("--depth", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--prepend-title", action="store_true")
    p.add_argument("--neg-ratio", type=int)
    p.add_argument("--metric", choices=["ndcg", "map"])
    p.add_argument("--k", type=int)
    p.add_argument("--gain", choices=["linear", "exp"])
    p.add_argument("--perm-samples", type=int)
    p.add_argument("--candidates-from", action="append", metavar="VARIANT=SOURCE")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="passrank", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("index", help="build an inverted index snapshot")
    p.add_argument("--corpus", required=True)
    p.add_argument("--format", default="jsonl", choices=["jsonl", "trectext"])
    p.add_argument("--analyzer", default="standard", choices=["standard", "plain"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", help="first-stage BM25 or SDM retrieval")
    p.add_argument("--index", required=True)
    p.add_argument("--topics", required=True)
    p.add_argument("--variant", default="title")
    p.add_argument("--model", default="bm25", choices=["bm25", "sdm"])
    p.add_argument("--k1", type=float, default=1.2)
    p.add_argument("--b", type=float, default=0.75)
    p.add_argument("--sdm-weights", type=_weights, default=(0.85, 0.10, 0.05))
    p.add_argument("--window-o", type=int, default=1)
    p.add_argument("--window-u", type=int, default=8)
    p.add_argument("--depth", type=int, default=100)
    p.add_argument("--tag")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("segment", help="dump sliding-window passages as JSONL")
    p.add_argument("--corpus", required=True)
    p.add_argument("--format", default="jsonl", choices=["jsonl", "trectext"])
    p.add_argument("--window", type=int, default=150)
    p.add_argument("--stride", type=int, default=75)
    p.add_argument("--prepend-title", action="store_true")
    p.add_argument("--max-passages", type=int, default=30)
    p.add_argument("--qrels")
    p.add_argument("--query-id", help="label passages by this query's judgments")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train", help="fine-tune a cross-encoder on candidate passages")
    _add_config_flags(p)
    p.add_argument("--variant", default="title")
    p.add_argument("--queries", help="comma-separated training query ids (default: all)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rerank", help="re-rank first-stage candidates with a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--variant", default="title")
    p.add_argument("--mode", default="MaxP", choices=["FirstP", "MaxP", "SumP"])
    p.add_argument("--queries")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("eval", help="score a run file against qrels")
    p.add_argument("--qrels", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--baseline", help="second run for a paired permutation test")
    p.add_argument("--metric", default="ndcg", choices=["ndcg", "map"])
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--gain", default="linear", choices=["linear", "exp"])
    p.add_argument("--perm-samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", default="text", choices=["text", "json"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="cross-validated re-ranking experiment")
    _add_config_flags(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("adapt", help="three-arm pretraining / weak-log adaptation study")
    _add_config_flags(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("trace", help="export attention matrices for one query-passage pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--passage", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("weaklog", help="synthesize title-as-query weak supervision")
    p.add_argument("--corpus", required=True)
    p.add_argument("--format", default="jsonl", choices=["jsonl", "trectext"])
    p.add_argument("--n-queries", type=int, required=True)
    p.add_argument("--negatives", type=int, default=4)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_weaklog)

    p = sub.add_parser("audit", help="check an experiment workdir for fold leakage")
    p.add_argument("--workdir", required=True)
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
