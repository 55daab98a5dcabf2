"""Desk-scale settings for the synthetic needle experiments.

The synthetic documents are 60 words long, so passages use a 40-word window
with a 20-word stride: every document has exactly two passages and the
answer phrase sits in the part only the second one covers.
"""

from __future__ import annotations

from pathlib import Path

from . import corpus as cio
from .crossenc import EncoderConfig, TrainConfig
from .experiment import AdaptConfig, ExperimentConfig, PassageConfig
from .synthetic import SyntheticCollection, SyntheticSpec, make_collection

DESK_SEED = 7


def write_synthetic(directory, spec: SyntheticSpec = SyntheticSpec()) -> SyntheticCollection:
    """Write corpus.jsonl, topics.txt and qrels.txt for a synthetic collection."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    coll = make_collection(spec)
    cio.write_corpus(coll.docs, directory / "corpus.jsonl")
    cio.atomic_write_text(directory / "topics.txt", cio.format_topics(coll.topics))
    cio.write_qrels(coll.qrels, directory / "qrels.txt")
    return coll


def desk_experiment_config(data_dir, workdir, seed: int = DESK_SEED, steps: int = 300) -> ExperimentConfig:
    d = Path(data_dir)
    return ExperimentConfig(
        str(d / "corpus.jsonl"), str(d / "topics.txt"), str(d / "qrels.txt"), str(workdir),
        seed=seed,
        passage=PassageConfig(window=40, stride=20),
        encoder=EncoderConfig(max_len=64, dtype="float32"),
        train=TrainConfig(steps=steps, lr=1e-3, batch=32),
    )


def desk_adaptation_config(
    data_dir, workdir, seed: int = DESK_SEED, finetune_steps: int = 150,
    pretrain_steps: int = 300, weak_steps: int = 300, weak_queries: int = 200,
) -> ExperimentConfig:
    # fine-tuning is kept short so the arms differ in what they start from
    cfg = desk_experiment_config(data_dir, workdir, seed, finetune_steps)
    cfg.adaptation = AdaptConfig(
        pretrain=TrainConfig(steps=pretrain_steps),
        weak=TrainConfig(steps=weak_steps),
        weak_queries=weak_queries,
    )
    return cfg
