"""Numpy transformer cross-encoder with analytic backpropagation.

Layout follows the sentence-pair classifier: ``[CLS] query [SEP] passage
[SEP]``, token + segment + position embeddings, post-layer-norm transformer
blocks with GELU feed-forward, and a tanh MLP head on the ``[CLS]`` vector
producing a relevance probability.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

SEG_Q, SEG_D = 0, 1
LN_EPS = 1e-12
P_CLAMP = 1e-12
CHECKPOINT_FORMAT = "passrank-crossenc"
CHECKPOINT_VERSION = 1

_GELU_C = math.sqrt(2.0 / math.pi)


class NumericError(ArithmeticError):
    """Non-finite parameters or a diverging loss."""


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    hidden: int = 64
    heads: int = 4
    ffn: int = 128
    max_len: int = 128
    vocab_size: int = 2048
    dropout: float = 0.0
    max_query_len: int = 32
    init_std: float = 0.02
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("num_layers", "hidden", "heads", "ffn", "vocab_size", "max_query_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.hidden % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide hidden ({self.hidden})")
        if self.max_len < 8:
            raise ValueError("max_len must be >= 8")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


# ---------------------------------------------------------------------------
# parameters

HEAD_KEYS = ("head.wh", "head.bh", "head.w", "head.b")


def layer_keys(layer: int) -> list[str]:
    return [
        f"layer{layer}.{n}"
        for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b",
                  "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")
    ]


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    H, F = cfg.hidden, cfg.ffn
    shapes = {
        "tok_emb": (cfg.vocab_size, H),
        "seg_emb": (2, H),
        "pos_emb": (cfg.max_len, H),
        "emb_ln_g": (H,),
        "emb_ln_b": (H,),
    }
    for l in range(cfg.num_layers):
        p = f"layer{l}."
        for n in ("wq", "wk", "wv", "wo"):
            shapes[p + n] = (H, H)
        for n in ("bq", "bk", "bv", "bo", "ln1_g", "ln1_b", "b2", "ln2_g", "ln2_b"):
            shapes[p + n] = (H,)
        shapes[p + "w1"] = (H, F)
        shapes[p + "b1"] = (F,)
        shapes[p + "w2"] = (F, H)
    shapes.update({"head.wh": (H, H), "head.bh": (H,), "head.w": (H,), "head.b": (1,)})
    shapes["mlm.b"] = (cfg.vocab_size,)
    return shapes


def encoder_keys(cfg: EncoderConfig) -> list[str]:
    return [k for k in param_shapes(cfg) if not k.startswith("head.")]


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.tensors[key]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def check_finite(self) -> None:
        for k, v in self.tensors.items():
            if not np.all(np.isfinite(v)):
                raise NumericError(f"parameter {k} has non-finite values")

    def astype(self, dtype: str) -> "EncoderParams":
        cfg = EncoderConfig(**{**asdict(self.config), "dtype": dtype})
        return EncoderParams(cfg, {k: v.astype(dtype) for k, v in self.tensors.items()})


def _is_ln_gain(key: str) -> bool:
    return key.endswith("_g")


def init_head(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    H = cfg.hidden
    scale = 1.0 / math.sqrt(H)
    return {
        "head.wh": rng.normal(0.0, scale, (H, H)).astype(cfg.dtype),
        "head.bh": np.zeros(H, cfg.dtype),
        "head.w": rng.normal(0.0, scale, (H,)).astype(cfg.dtype),
        "head.b": np.zeros(1, cfg.dtype),
    }


def init_params(cfg: EncoderConfig, seed: int = 0) -> EncoderParams:
    """Gaussian(0, init_std) matrices and embeddings, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for k, shape in param_shapes(cfg).items():
        if k.startswith("head."):
            continue
        if _is_ln_gain(k):
            tensors[k] = np.ones(shape, cfg.dtype)
        elif len(shape) == 1:
            tensors[k] = np.zeros(shape, cfg.dtype)
        else:
            tensors[k] = rng.normal(0.0, cfg.init_std, shape).astype(cfg.dtype)
    tensors.update(init_head(cfg, rng))
    return EncoderParams(cfg, tensors)


def save_params(params: EncoderParams, path) -> None:
    """Checkpoint: ``.npz`` with a JSON header entry describing format and config."""
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "config": asdict(params.config)}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, __header__=np.array(json.dumps(header)), **params.tensors)
    tmp.replace(path)


def load_params(path) -> EncoderParams:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a cross-encoder checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        cfg = EncoderConfig(**header["config"])
        tensors = {k: z[k].copy() for k in z.files if k != "__header__"}
    shapes = param_shapes(cfg)
    for k, shape in shapes.items():
        if k not in tensors or tensors[k].shape != shape:
            raise ValueError(f"{path}: tensor {k} missing or mis-shaped")
    return EncoderParams(cfg, tensors)


# ---------------------------------------------------------------------------
# input encoding

@dataclass(frozen=True)
class InputEncoding:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    position_ids: np.ndarray
    attention_mask: np.ndarray
    length: int
    truncated: bool = False


@dataclass(frozen=True)
class SpecialIds:
    pad: int
    cls: int
    sep: int
    mask: int
    unk: int = 1

    @classmethod
    def from_vocab(cls, vocab) -> "SpecialIds":
        return cls(vocab.pad_id, vocab.cls_id, vocab.sep_id, vocab.mask_id, vocab.unk_id)


# default layout of the reserved block in a SubwordVocab
DEFAULT_SPECIALS = SpecialIds(pad=0, cls=2, sep=3, mask=4, unk=1)


def _pack(ids: list[int], segs: list[int], max_len: int, pad: int, truncated: bool) -> InputEncoding:
    n = len(ids)
    tok = np.full(max_len, pad, dtype=np.int64)
    seg = np.zeros(max_len, dtype=np.int64)
    tok[:n] = ids
    seg[:n] = segs
    mask = np.zeros(max_len, dtype=np.int64)
    mask[:n] = 1
    return InputEncoding(tok, seg, np.arange(max_len, dtype=np.int64), mask, n, truncated)


def encode_pair(
    query_ids: Sequence[int],
    passage_ids: Sequence[int],
    config: EncoderConfig,
    specials: SpecialIds = DEFAULT_SPECIALS,
) -> InputEncoding:
    """``[CLS] q [SEP] p [SEP]`` padded to ``max_len``.

    The query is cut to ``max_query_len`` first; the passage then loses tokens
    from its end until the sequence fits.
    """
    q = list(query_ids)[: config.max_query_len]
    if len(q) > config.max_len - 3:
        q = q[: config.max_len - 3]
    if not q:
        raise ValueError("empty query")
    room = config.max_len - len(q) - 3
    p = list(passage_ids)
    truncated = len(q) < len(query_ids) or len(p) > room
    p = p[:room]
    ids = [specials.cls, *q, specials.sep, *p, specials.sep]
    segs = [SEG_Q] * (len(q) + 2) + [SEG_D] * (len(p) + 1)
    return _pack(ids, segs, config.max_len, specials.pad, truncated)


def encode_single(token_ids: Sequence[int], config: EncoderConfig, specials: SpecialIds = DEFAULT_SPECIALS) -> InputEncoding:
    """``[CLS] t [SEP]`` for masked-token pretraining, all in segment Q."""
    t = list(token_ids)[: config.max_len - 2]
    ids = [specials.cls, *t, specials.sep]
    return _pack(ids, [SEG_Q] * len(ids), config.max_len, specials.pad, len(t) < len(token_ids))


@dataclass
class Batch:
    token_ids: np.ndarray  # [B, T]
    segment_ids: np.ndarray
    mask: np.ndarray  # bool [B, T]

    @classmethod
    def stack(cls, encodings: Sequence[InputEncoding]) -> "Batch":
        # trailing padding shared by the whole batch is dropped
        T = max(e.length for e in encodings)
        return cls(
            np.stack([e.token_ids[:T] for e in encodings]),
            np.stack([e.segment_ids[:T] for e in encodings]),
            np.stack([e.attention_mask[:T] for e in encodings]).astype(bool),
        )

    def __len__(self):
        return self.token_ids.shape[0]


# ---------------------------------------------------------------------------
# primitives

def layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layer_norm_back(dy, cache):
    xhat, inv, g = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(red), dy.sum(red)


def gelu(x):
    """tanh approximation of GELU."""
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), t


def gelu_back(dy, x, t):
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def _dropout(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


# ---------------------------------------------------------------------------
# forward / backward

@dataclass
class AttentionTrace:
    """Per-layer, per-head attention over the unmasked positions of one sequence."""

    tokens: list[str]
    matrices: list[list[np.ndarray]]  # [layer][head] -> [n, n]

    def to_json(self) -> dict:
        return {
            "tokens": self.tokens,
            "layers": [[m.tolist() for m in heads] for heads in self.matrices],
        }


def encode_hidden(params: EncoderParams, batch: Batch, rng: np.random.Generator | None = None):
    """Run embeddings and transformer layers; returns final hidden states and a cache.

    ``rng`` enables dropout (training mode); ``None`` is deterministic eval.
    """
    cfg = params.config
    P = params.tensors
    B, T = batch.token_ids.shape
    A, d = cfg.heads, cfg.head_dim
    rate = cfg.dropout
    cache: dict = {"batch": batch, "layers": []}

    x0 = P["tok_emb"][batch.token_ids] + P["seg_emb"][batch.segment_ids] + P["pos_emb"][:T][None]
    h, cache["emb_ln"] = layer_norm(x0, P["emb_ln_g"], P["emb_ln_b"])
    h, cache["emb_drop"] = _dropout(h, rate, rng)

    neg = np.where(batch.mask, 0.0, -np.inf).astype(h.dtype)[:, None, None, :]  # [B,1,1,T]
    scale = h.dtype.type(1.0 / math.sqrt(d))
    for l in range(cfg.num_layers):
        p = f"layer{l}."
        lc = {"h_in": h}
        q = (h @ P[p + "wq"] + P[p + "bq"]).reshape(B, T, A, d).transpose(0, 2, 1, 3)
        k = (h @ P[p + "wk"] + P[p + "bk"]).reshape(B, T, A, d).transpose(0, 2, 1, 3)
        v = (h @ P[p + "wv"] + P[p + "bv"]).reshape(B, T, A, d).transpose(0, 2, 1, 3)
        s = (q @ k.transpose(0, 1, 3, 2)) * scale + neg
        s = s - s.max(-1, keepdims=True)
        e = np.exp(s)
        att = e / e.sum(-1, keepdims=True)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.hidden)
        a = ctx @ P[p + "wo"] + P[p + "bo"]
        a, lc["drop1"] = _dropout(a, rate, rng)
        h1, lc["ln1"] = layer_norm(h + a, P[p + "ln1_g"], P[p + "ln1_b"])
        pre = h1 @ P[p + "w1"] + P[p + "b1"]
        act, t = gelu(pre)
        f = act @ P[p + "w2"] + P[p + "b2"]
        f, lc["drop2"] = _dropout(f, rate, rng)
        h, lc["ln2"] = layer_norm(h1 + f, P[p + "ln2_g"], P[p + "ln2_b"])
        lc.update(q=q, k=k, v=v, att=att, ctx=ctx, h1=h1, pre=pre, act=act, t=t)
        cache["layers"].append(lc)
    return h, cache


def _outer_sum(x, dy):
    """sum over batch and time of x^T dy, as one BLAS call."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def _scatter_rows(ids, values, n_rows):
    """Sum ``values`` rows into ``n_rows`` buckets keyed by ``ids``."""
    flat_ids = ids.reshape(-1)
    flat = values.reshape(-1, values.shape[-1])
    out = np.empty((n_rows, flat.shape[1]), dtype=values.dtype)
    for j in range(flat.shape[1]):
        out[:, j] = np.bincount(flat_ids, weights=flat[:, j], minlength=n_rows)
    return out


def encode_hidden_back(params: EncoderParams, dh, cache, grads: dict) -> None:
    """Accumulate encoder gradients into ``grads`` given dL/d(final hidden)."""
    cfg = params.config
    P = params.tensors
    batch = cache["batch"]
    B, T = batch.token_ids.shape
    A, d, H = cfg.heads, cfg.head_dim, cfg.hidden
    scale = 1.0 / math.sqrt(d)

    for l in reversed(range(cfg.num_layers)):
        p = f"layer{l}."
        lc = cache["layers"][l]
        dz, grads[p + "ln2_g"], grads[p + "ln2_b"] = layer_norm_back(dh, lc["ln2"])
        dh1 = dz.copy()
        df = dz if lc["drop2"] is None else dz * lc["drop2"]
        grads[p + "w2"] = _outer_sum(lc["act"], df)
        grads[p + "b2"] = df.sum((0, 1))
        dact = df @ P[p + "w2"].T
        dpre = gelu_back(dact, lc["pre"], lc["t"])
        grads[p + "w1"] = _outer_sum(lc["h1"], dpre)
        grads[p + "b1"] = dpre.sum((0, 1))
        dh1 += dpre @ P[p + "w1"].T

        dy, grads[p + "ln1_g"], grads[p + "ln1_b"] = layer_norm_back(dh1, lc["ln1"])
        dh_in = dy.copy()
        da = dy if lc["drop1"] is None else dy * lc["drop1"]
        grads[p + "wo"] = _outer_sum(lc["ctx"], da)
        grads[p + "bo"] = da.sum((0, 1))
        dctx = (da @ P[p + "wo"].T).reshape(B, T, A, d).transpose(0, 2, 1, 3)
        att, q, k, v = lc["att"], lc["q"], lc["k"], lc["v"]
        datt = dctx @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dctx
        ds = att * (datt - (datt * att).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q

        h_in = lc["h_in"]
        for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
            dflat = dproj.transpose(0, 2, 1, 3).reshape(B, T, H)
            grads[p + "w" + name] = _outer_sum(h_in, dflat)
            grads[p + "b" + name] = dflat.sum((0, 1))
            dh_in += dflat @ P[p + "w" + name].T
        dh = dh_in

    if cache["emb_drop"] is not None:
        dh = dh * cache["emb_drop"]
    dx0, grads["emb_ln_g"], grads["emb_ln_b"] = layer_norm_back(dh, cache["emb_ln"])
    dtok = grads.get("tok_emb")
    if dtok is None:
        dtok = np.zeros_like(P["tok_emb"])
    dtok += _scatter_rows(batch.token_ids, dx0, P["tok_emb"].shape[0])
    grads["tok_emb"] = dtok
    grads["seg_emb"] = _scatter_rows(batch.segment_ids, dx0, 2).astype(dx0.dtype)
    dpos = np.zeros_like(P["pos_emb"])
    dpos[:T] = dx0.sum(0)
    grads["pos_emb"] = dpos


def head_forward(params: EncoderParams, h):
    P = params.tensors
    cls = h[:, 0]
    z = np.tanh(cls @ P["head.wh"] + P["head.bh"])
    logit = z @ P["head.w"] + P["head.b"][0]
    return logit, (cls, z)


def forward_batch(params: EncoderParams, batch: Batch, rng=None):
    """Relevance logits and probabilities for a batch (no finiteness check)."""
    h, cache = encode_hidden(params, batch, rng)
    logit, hc = head_forward(params, h)
    return logit, sigmoid(logit), (h, cache, hc)


def forward(
    params: EncoderParams,
    encoding: InputEncoding,
    capture_attention: bool = False,
    token_strings: Sequence[str] | None = None,
):
    """Relevance probability for one encoding, optionally with its attention trace."""
    params.check_finite()
    batch = Batch.stack([encoding])
    _, prob, (_, cache, _) = forward_batch(params, batch)
    trace = None
    if capture_attention:
        n = encoding.length
        tokens = list(token_strings) if token_strings is not None else [str(t) for t in encoding.token_ids[:n]]
        mats = [[lc["att"][0, a, :n, :n].copy() for a in range(params.config.heads)] for lc in cache["layers"]]
        trace = AttentionTrace(tokens[:n], mats)
    return float(prob[0]), trace


def score_encodings(params: EncoderParams, encodings: Sequence[InputEncoding], batch_size: int = 64, logits: bool = False) -> np.ndarray:
    """Probabilities (or pre-logistic scores) for many encodings, eval mode."""
    params.check_finite()
    out = []
    order = sorted(range(len(encodings)), key=lambda i: encodings[i].length)
    res = np.empty(len(encodings))
    for s in range(0, len(order), batch_size):
        idx = order[s:s + batch_size]
        lg, pr, _ = forward_batch(params, Batch.stack([encodings[i] for i in idx]))
        res[idx] = lg if logits else pr
    out.append(res)
    return res


def _zero_grads(params: EncoderParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def bce_loss(prob: np.ndarray, labels: np.ndarray) -> float:
    clipped = np.clip(prob, P_CLAMP, 1.0 - P_CLAMP)
    if np.any(clipped != prob):
        log.warning("relevance probability clamped to [%g, 1-%g] before log", P_CLAMP, P_CLAMP)
    return float(-np.mean(labels * np.log(clipped) + (1 - labels) * np.log(1 - clipped)))


def loss_and_gradients_batch(params: EncoderParams, batch: Batch, labels: np.ndarray, rng=None):
    P = params.tensors
    B = len(batch)
    labels = np.asarray(labels, dtype=P["head.w"].dtype)
    logit, prob, (h, cache, (cls, z)) = forward_batch(params, batch, rng)
    loss = bce_loss(prob, labels)

    grads = _zero_grads(params)
    dlogit = (prob - labels) / B
    grads["head.w"] = z.T @ dlogit
    grads["head.b"] = np.array([dlogit.sum()], dtype=dlogit.dtype)
    dz = np.outer(dlogit, P["head.w"])
    dpre = dz * (1.0 - z * z)
    grads["head.wh"] = cls.T @ dpre
    grads["head.bh"] = dpre.sum(0)
    dh = np.zeros_like(h)
    dh[:, 0] = dpre @ P["head.wh"].T
    encode_hidden_back(params, dh, cache, grads)
    return loss, grads


def loss_and_gradients(params: EncoderParams, examples: Sequence[tuple[InputEncoding, int]]):
    """Mean binary cross-entropy over ``(encoding, label)`` pairs and its exact gradient."""
    if not examples:
        raise ValueError("empty batch")
    params.check_finite()
    batch = Batch.stack([e for e, _ in examples])
    return loss_and_gradients_batch(params, batch, np.array([y for _, y in examples]))


def mlm_loss_and_gradients(params: EncoderParams, batch: Batch, targets: np.ndarray, rng=None):
    """Cross-entropy of the original tokens at masked positions (``targets`` >= 0).

    The output projection is tied to the token embedding.
    """
    P = params.tensors
    h, cache = encode_hidden(params, batch, rng)
    sel = targets >= 0
    n = int(sel.sum())
    if n == 0:
        raise ValueError("no masked positions")
    hm = h[sel]
    logits = hm @ P["tok_emb"].T + P["mlm.b"]
    logits = logits - logits.max(-1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    tgt = targets[sel]
    loss = float(-logp[np.arange(n), tgt].mean())
    correct = int((logp.argmax(-1) == tgt).sum())

    grads = _zero_grads(params)
    dlog = np.exp(logp)
    dlog[np.arange(n), tgt] -= 1.0
    dlog /= n
    grads["mlm.b"] = dlog.sum(0)
    grads["tok_emb"] = dlog.T @ hm
    dh = np.zeros_like(h)
    dh[sel] = dlog @ P["tok_emb"]
    encode_hidden_back(params, dh, cache, grads)
    return loss, grads, correct / n
