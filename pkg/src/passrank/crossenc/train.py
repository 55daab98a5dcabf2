"""Optimisation, masked-token pretraining, head re-initialisation and gradient checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import (
    Batch,
    EncoderConfig,
    EncoderParams,
    InputEncoding,
    NumericError,
    SpecialIds,
    DEFAULT_SPECIALS,
    encode_single,
    encoder_keys,
    forward_batch,
    init_head,
    init_params,
    loss_and_gradients_batch,
    mlm_loss_and_gradients,
    param_shapes,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    steps: int = 500
    batch: int = 32
    seed: int = 0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = 1.0


class Adam:
    """Adam with decoupled weight decay on matrices (not on biases or LN gains)."""

    def __init__(self, params: EncoderParams, hp: TrainConfig):
        self.hp = hp
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(self, params: EncoderParams, grads: dict[str, np.ndarray], keys=None) -> None:
        hp = self.hp
        self.t += 1
        if hp.grad_clip is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > hp.grad_clip:
                grads = {k: g * (hp.grad_clip / norm) for k, g in grads.items()}
        c1 = 1.0 - hp.beta1 ** self.t
        c2 = 1.0 - hp.beta2 ** self.t
        for k in sorted(keys if keys is not None else grads):
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= hp.beta1
            m += (1 - hp.beta1) * g
            v *= hp.beta2
            v += (1 - hp.beta2) * g * g
            w = params.tensors[k]
            if hp.weight_decay and w.ndim == 2:
                w -= hp.lr * hp.weight_decay * w
            w -= hp.lr * (m / c1) / (np.sqrt(v / c2) + hp.eps)


@dataclass
class _Stacked:
    ids: np.ndarray
    segs: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray

    @classmethod
    def from_encodings(cls, encs: Sequence[InputEncoding]) -> "_Stacked":
        return cls(
            np.stack([e.token_ids for e in encs]),
            np.stack([e.segment_ids for e in encs]),
            np.stack([e.attention_mask for e in encs]).astype(bool),
            np.array([e.length for e in encs]),
        )

    def batch(self, idx) -> Batch:
        T = int(self.lengths[idx].max())
        return Batch(self.ids[idx, :T], self.segs[idx, :T], self.mask[idx, :T])


def train(
    params: EncoderParams,
    examples: Sequence[tuple[InputEncoding, int]],
    hyper: TrainConfig = TrainConfig(),
) -> tuple[EncoderParams, list[float]]:
    """Fine-tune on labelled pairs; returns the new params and the per-step loss curve.

    Mini-batches are sampled without replacement per epoch from a generator
    seeded by ``hyper.seed``; dropout draws from the same generator.
    """
    if not examples:
        raise ValueError("empty training set")
    params = params.copy()
    if hyper.steps == 0:
        return params, []
    params.check_finite()
    data = _Stacked.from_encodings([e for e, _ in examples])
    labels = np.array([y for _, y in examples], dtype=params["head.w"].dtype)
    rng = np.random.default_rng(hyper.seed)
    opt = Adam(params, hyper)
    losses = []
    order = np.array([], dtype=int)
    bs = min(hyper.batch, len(examples))
    drop_rng = rng if params.config.dropout > 0 else None
    for step in range(hyper.steps):
        if len(order) < bs:
            order = np.concatenate([order, rng.permutation(len(examples))])
        idx, order = order[:bs], order[bs:]
        loss, grads = loss_and_gradients_batch(params, data.batch(idx), labels[idx], drop_rng)
        if not np.isfinite(loss):
            raise NumericError(f"training loss diverged at step {step}")
        grads.pop("mlm.b", None)
        opt.step(params, grads)
        losses.append(loss)
    return params, losses


def evaluate_loss(params: EncoderParams, examples: Sequence[tuple[InputEncoding, int]], batch: int = 64) -> float:
    data = _Stacked.from_encodings([e for e, _ in examples])
    labels = np.array([y for _, y in examples], dtype=float)
    total = 0.0
    for s in range(0, len(examples), batch):
        idx = np.arange(s, min(s + batch, len(examples)))
        loss, _ = loss_and_gradients_batch(params, data.batch(idx), labels[idx])
        total += loss * len(idx)
    return total / len(examples)


# ---------------------------------------------------------------------------
# masked-token pretraining

def mask_tokens(
    enc_ids: np.ndarray,
    lengths: np.ndarray,
    rng: np.random.Generator,
    rate: float,
    specials: SpecialIds,
    special_set: frozenset[int],
) -> tuple[np.ndarray, np.ndarray]:
    """Replace ``rate`` of the non-special tokens (at least one) by ``[MASK]``."""
    ids = enc_ids.copy()
    targets = np.full(ids.shape, -1, dtype=np.int64)
    for i in range(ids.shape[0]):
        cand = [j for j in range(int(lengths[i])) if int(ids[i, j]) not in special_set]
        if not cand:
            continue
        n = max(1, int(round(rate * len(cand))))
        chosen = rng.choice(cand, size=n, replace=False)
        targets[i, chosen] = ids[i, chosen]
        ids[i, chosen] = specials.mask
    return ids, targets


def pretrain_masked(
    config: EncoderConfig,
    passages: Sequence[Sequence[int]],
    hyper: TrainConfig = TrainConfig(),
    mask_rate: float = 0.15,
    specials: SpecialIds = DEFAULT_SPECIALS,
    init: EncoderParams | None = None,
) -> tuple[EncoderParams, list[float]]:
    """Masked-token pretraining over token-id sequences.

    Masks are redrawn for every mini-batch.  Only encoder tensors and the
    output bias are updated; the relevance head is left as initialised.
    """
    if not passages:
        raise ValueError("empty pretraining corpus")
    if not 0.0 < mask_rate < 1.0:
        raise ValueError("mask_rate must be in (0, 1); with no masked tokens the loss is undefined")
    params = init.copy() if init is not None else init_params(config, hyper.seed)
    encs = [encode_single(p, config, specials) for p in passages]
    data = _Stacked.from_encodings(encs)
    special_set = frozenset({specials.pad, specials.cls, specials.sep, specials.mask})
    rng = np.random.default_rng(hyper.seed)
    opt = Adam(params, hyper)
    keys = [k for k in param_shapes(config) if not k.startswith("head.")]
    bs = min(hyper.batch, len(encs))
    order = np.array([], dtype=int)
    losses = []
    drop_rng = rng if config.dropout > 0 else None
    for step in range(hyper.steps):
        if len(order) < bs:
            order = np.concatenate([order, rng.permutation(len(encs))])
        idx, order = order[:bs], order[bs:]
        b = data.batch(idx)
        masked, targets = mask_tokens(b.token_ids, data.lengths[idx], rng, mask_rate, specials, special_set)
        b = Batch(masked, b.segment_ids, b.mask)
        if (targets >= 0).sum() == 0:
            continue
        loss, grads, _ = mlm_loss_and_gradients(params, b, targets, drop_rng)
        if not np.isfinite(loss):
            raise NumericError(f"pretraining loss diverged at step {step}")
        opt.step(params, grads, keys)
        losses.append(loss)
    return params, losses


def masked_accuracy(
    params: EncoderParams,
    passages: Sequence[Sequence[int]],
    seed: int,
    mask_rate: float = 0.15,
    specials: SpecialIds = DEFAULT_SPECIALS,
) -> float:
    """Accuracy of recovering freshly drawn masks (held out from training draws)."""
    cfg = params.config
    data = _Stacked.from_encodings([encode_single(p, cfg, specials) for p in passages])
    rng = np.random.default_rng(seed)
    special_set = frozenset({specials.pad, specials.cls, specials.sep, specials.mask})
    idx = np.arange(len(passages))
    b = data.batch(idx)
    masked, targets = mask_tokens(b.token_ids, data.lengths, rng, mask_rate, specials, special_set)
    _, _, acc = mlm_loss_and_gradients(params, Batch(masked, b.segment_ids, b.mask), targets)
    return acc


def init_for_finetune(pretrained: EncoderParams, seed: int, config: EncoderConfig | None = None) -> EncoderParams:
    """Copy encoder tensors verbatim and draw a fresh relevance head from ``seed``."""
    cfg = config or pretrained.config
    shapes = param_shapes(cfg)
    for k in encoder_keys(cfg):
        if k not in pretrained.tensors or pretrained.tensors[k].shape != shapes[k]:
            raise ValueError(f"pretrained tensor {k} missing or shape-incompatible with config")
    tensors = {k: pretrained.tensors[k].copy() for k in encoder_keys(cfg)}
    # offset keeps the head stream apart from init_params(seed)
    tensors.update(init_head(cfg, np.random.default_rng([seed, 0x4EAD])))
    return EncoderParams(cfg, tensors)


# ---------------------------------------------------------------------------
# finite-difference check

def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def gradient_check(
    params: EncoderParams,
    examples: Sequence[tuple[InputEncoding, int]] | InputEncoding,
    label: int | None = None,
    epsilon: float = 1e-5,
    max_coords: int | None = 64,
    seed: int = 0,
) -> tuple[float, dict[str, float]]:
    """Worst relative error between analytic and central-difference gradients.

    Bias and gain vectors are checked in full; matrices on up to
    ``max_coords`` random coordinates each (``None`` checks everything).
    Returns the overall maximum and the per-tensor maxima.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if isinstance(examples, InputEncoding):
        if label is None:
            raise ValueError("label required with a single encoding")
        examples = [(examples, label)]
    params = params.astype("float64")
    batch = Batch.stack([e for e, _ in examples])
    labels = np.array([y for _, y in examples], dtype=np.float64)
    _, grads = loss_and_gradients_batch(params, batch, labels)
    rng = np.random.default_rng(seed)

    def loss_at() -> float:
        _, prob, _ = forward_batch(params, batch)
        p = np.clip(prob, 1e-12, 1 - 1e-12)
        return float(-np.mean(labels * np.log(p) + (1 - labels) * np.log(1 - p)))

    worst = {}
    for k, w in params.tensors.items():
        flat = w.reshape(-1)
        g = grads[k].reshape(-1)
        if w.ndim == 1 or max_coords is None or flat.size <= max_coords:
            coords = range(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        err = 0.0
        for c in coords:
            old = flat[c]
            flat[c] = old + epsilon
            lp = loss_at()
            flat[c] = old - epsilon
            lm = loss_at()
            flat[c] = old
            err = max(err, relative_error(float(g[c]), (lp - lm) / (2 * epsilon)))
        worst[k] = err
    return max(worst.values()), worst
