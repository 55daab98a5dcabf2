import dataclasses
import importlib
import math
import time

import numpy as np
import pytest

from passrank.crossenc import (
    Batch,
    EncoderConfig,
    NumericError,
    TrainConfig,
    encode_pair,
    encode_single,
    encoder_keys,
    forward,
    gradient_check,
    init_for_finetune,
    init_params,
    load_params,
    loss_and_gradients,
    masked_accuracy,
    mlm_loss_and_gradients,
    pretrain_masked,
    relative_error,
    save_params,
    score_encodings,
    train,
)
from passrank.crossenc.model import DEFAULT_SPECIALS as SP, encode_hidden, forward_batch

train_mod = importlib.import_module("passrank.crossenc.train")

TINY = EncoderConfig(num_layers=1, hidden=8, heads=2, ffn=16, max_len=12, vocab_size=40,
                     max_query_len=4, init_std=0.5)
SMALL = EncoderConfig(num_layers=2, hidden=16, heads=4, ffn=32, max_len=24, vocab_size=30, max_query_len=6)


def random_pair(rng, cfg, qmax=4, pmax=20):
    q = rng.integers(5, cfg.vocab_size, rng.integers(1, qmax + 1)).tolist()
    p = rng.integers(5, cfg.vocab_size, rng.integers(0, pmax + 1)).tolist()
    return encode_pair(q, p, cfg)


class TestEncoding:
    def test_layout(self):
        cfg = dataclasses.replace(SMALL, max_len=16)
        e = encode_pair([11, 12], [21, 22, 23], cfg)
        assert e.length == 8
        assert e.token_ids[:8].tolist() == [SP.cls, 11, 12, SP.sep, 21, 22, 23, SP.sep]
        assert e.segment_ids[:8].tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
        assert e.attention_mask.tolist() == [1] * 8 + [0] * 8
        assert e.position_ids.tolist() == list(range(16))
        assert (e.token_ids[8:] == SP.pad).all()

    def test_empty_passage(self):
        e = encode_pair([11], [], SMALL)
        assert e.token_ids[: e.length].tolist() == [SP.cls, 11, SP.sep, SP.sep]

    def test_passage_truncated_to_fit(self):
        e = encode_pair([11, 12], list(range(5, 5 + 40)), SMALL)
        assert e.length == SMALL.max_len and e.truncated
        assert e.token_ids[3] == SP.sep and e.token_ids[-1] == SP.sep

    def test_query_truncated_first(self):
        e = encode_pair(list(range(5, 15)), [20], SMALL)
        assert e.token_ids[: e.length].tolist() == [SP.cls, *range(5, 11), SP.sep, 20, SP.sep]

    def test_empty_query(self):
        with pytest.raises(ValueError):
            encode_pair([], [5], SMALL)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EncoderConfig(hidden=10, heads=3)
        with pytest.raises(ValueError):
            EncoderConfig(max_len=4)


class TestForward:
    def test_probability_and_trace(self):
        rng = np.random.default_rng(0)
        params = init_params(SMALL, 1)
        for _ in range(10):
            e = random_pair(rng, SMALL)
            p, trace = forward(params, e, capture_attention=True)
            assert 0.0 < p < 1.0
            assert len(trace.matrices) == SMALL.num_layers
            assert all(len(h) == SMALL.heads for h in trace.matrices)
            for heads in trace.matrices:
                for m in heads:
                    assert m.shape == (e.length, e.length)
                    np.testing.assert_allclose(m.sum(-1), 1.0, atol=1e-6)

    def test_masked_columns_get_zero_weight(self):
        params = init_params(SMALL, 2)
        e = encode_pair([7, 8], [9, 10, 11], SMALL)
        batch = Batch(e.token_ids[None], e.segment_ids[None], e.attention_mask[None].astype(bool))
        _, cache = encode_hidden(params, batch)
        for lc in cache["layers"]:
            assert np.all(lc["att"][0, :, :, e.length:] == 0)

    def test_padding_invariance(self):
        rng = np.random.default_rng(3)
        params = init_params(SMALL, 3)
        e = random_pair(rng, SMALL, pmax=8)
        base, _ = forward(params, e)
        for _ in range(5):
            tok = e.token_ids.copy()
            tok[e.length:] = rng.integers(0, SMALL.vocab_size, SMALL.max_len - e.length)
            seg = e.segment_ids.copy()
            seg[e.length:] = rng.integers(0, 2, SMALL.max_len - e.length)
            b = Batch(tok[None], seg[None], e.attention_mask[None].astype(bool))
            _, prob, _ = forward_batch(params, b)
            assert abs(prob[0] - base) <= 1e-9

    def test_batched_scores_match_single(self):
        rng = np.random.default_rng(4)
        params = init_params(SMALL, 4)
        encs = [random_pair(rng, SMALL) for _ in range(12)]
        batched = score_encodings(params, encs, batch_size=5)
        single = [forward(params, e)[0] for e in encs]
        np.testing.assert_allclose(batched, single, atol=1e-12)
        logits = score_encodings(params, encs, logits=True)
        np.testing.assert_allclose(1 / (1 + np.exp(-logits)), batched, atol=1e-12)

    def test_non_finite_parameter(self):
        params = init_params(SMALL, 0)
        params.tensors["layer0.wq"][0, 0] = np.nan
        with pytest.raises(NumericError):
            forward(params, encode_pair([5], [6], SMALL))


class TestLoss:
    def test_half_probability(self):
        params = init_params(SMALL, 0)
        params.tensors["head.w"][:] = 0
        e = encode_pair([5], [6], SMALL)
        loss, _ = loss_and_gradients(params, [(e, 1)])
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_confident_correct_prediction(self):
        params = init_params(SMALL, 0)
        params.tensors["head.w"][:] = 0
        params.tensors["head.b"][:] = 30.0
        loss, _ = loss_and_gradients(params, [(encode_pair([5], [6], SMALL), 1)])
        assert loss < 1e-12

    def test_clamp_warns(self, caplog):
        params = init_params(SMALL, 0)
        params.tensors["head.w"][:] = 0
        params.tensors["head.b"][:] = 100.0
        loss, _ = loss_and_gradients(params, [(encode_pair([5], [6], SMALL), 0)])
        assert math.isfinite(loss) and loss == pytest.approx(-math.log(1e-12), rel=1e-6)
        assert "clamped" in caplog.text

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            loss_and_gradients(init_params(SMALL), [])


class TestGradientCheck:
    def test_tiny_config_all_coordinates(self):
        rng = np.random.default_rng(0)
        params = init_params(TINY, 5)
        examples = [(random_pair(rng, TINY, pmax=8), int(i % 2)) for i in range(4)]
        t0 = time.perf_counter()
        worst, per_tensor = gradient_check(params, examples, epsilon=1e-5, max_coords=None)
        assert time.perf_counter() - t0 < 60
        assert worst <= 1e-4
        assert set(per_tensor) == set(params.tensors)

    def test_single_encoding_form(self):
        params = init_params(TINY, 6)
        worst, _ = gradient_check(params, encode_pair([7, 8], [9], TINY), label=1)
        assert worst <= 1e-4

    def test_invalid_epsilon(self):
        with pytest.raises(ValueError):
            gradient_check(init_params(TINY), encode_pair([7], [9], TINY), label=0, epsilon=0)

    def test_relative_error_symmetric(self):
        for a, n in [(0.5, 0.25), (10.0, -3.0), (1e-9, 2e-9)]:
            assert relative_error(a, n) == relative_error(n, a)
        assert relative_error(100.0, 101.0) == pytest.approx(1 / 101)

    def test_mlm_gradients(self):
        params = init_params(TINY, 7).astype("float64")
        rng = np.random.default_rng(1)
        encs = [encode_single(rng.integers(5, 40, 6).tolist(), TINY) for _ in range(3)]
        b = Batch.stack(encs)
        targets = np.full(b.token_ids.shape, -1)
        targets[:, 2] = b.token_ids[:, 2]
        ids = b.token_ids.copy()
        ids[:, 2] = SP.mask
        b = Batch(ids, b.segment_ids, b.mask)
        _, grads, _ = mlm_loss_and_gradients(params, b, targets)
        eps = 1e-5
        for k in ("tok_emb", "layer0.wv", "emb_ln_g", "mlm.b", "pos_emb"):
            flat, g = params.tensors[k].reshape(-1), grads[k].reshape(-1)
            for c in rng.choice(flat.size, size=min(16, flat.size), replace=False):
                old = flat[c]
                flat[c] = old + eps
                lp = mlm_loss_and_gradients(params, b, targets)[0]
                flat[c] = old - eps
                lm = mlm_loss_and_gradients(params, b, targets)[0]
                flat[c] = old
                assert relative_error(g[c], (lp - lm) / (2 * eps)) <= 1e-4


def toy_examples(n=16, seed=0, cfg=SMALL):
    rng = np.random.default_rng(seed)
    return [(random_pair(rng, cfg, pmax=10), int(rng.integers(0, 2))) for _ in range(n)]


class TestTrain:
    def test_zero_steps_identity(self):
        params = init_params(SMALL, 0)
        out, losses = train(params, toy_examples(), TrainConfig(steps=0))
        assert losses == []
        for k in params.tensors:
            assert np.array_equal(out.tensors[k], params.tensors[k])

    def test_deterministic_and_decreasing(self):
        params = init_params(SMALL, 0)
        hyper = TrainConfig(steps=60, batch=8, seed=4, lr=3e-3)
        _, a = train(params, toy_examples(), hyper)
        _, b = train(params, toy_examples(), hyper)
        assert a == b
        assert np.mean(a[-10:]) < np.mean(a[:10])

    def test_divergence_reports_step(self, monkeypatch):
        real = train_mod.loss_and_gradients_batch
        calls = {"n": 0}

        def flaky(*args, **kw):
            calls["n"] += 1
            loss, g = real(*args, **kw)
            return (float("nan") if calls["n"] == 4 else loss), g

        monkeypatch.setattr(train_mod, "loss_and_gradients_batch", flaky)
        with pytest.raises(NumericError, match="step 3"):
            train(init_params(SMALL), toy_examples(), TrainConfig(steps=10, batch=4))

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train(init_params(SMALL), [], TrainConfig(steps=1))

    def test_weight_decay_shrinks_weights(self):
        params = init_params(SMALL, 0)
        plain, _ = train(params, toy_examples(), TrainConfig(steps=20, batch=8))
        decayed, _ = train(params, toy_examples(), TrainConfig(steps=20, batch=8, weight_decay=0.5))
        assert np.linalg.norm(decayed["layer0.wq"]) < np.linalg.norm(plain["layer0.wq"])


class TestPretrain:
    CFG = EncoderConfig(num_layers=1, hidden=32, heads=4, ffn=64, max_len=16, vocab_size=12)

    def test_repetitive_corpus_learned(self):
        corpus = [[5, 6, 7] * 4 for _ in range(16)]
        params, losses = pretrain_masked(self.CFG, corpus, TrainConfig(steps=200, batch=16, lr=3e-3))
        assert masked_accuracy(params, corpus, seed=999) > 0.9
        assert 1 / self.CFG.vocab_size < 0.1

    def test_determinism(self):
        corpus = [[5, 6, 7, 8, 9] for _ in range(6)]
        hyper = TrainConfig(steps=5, batch=4)
        assert pretrain_masked(self.CFG, corpus, hyper)[1] == pretrain_masked(self.CFG, corpus, hyper)[1]

    def test_degenerate_inputs(self):
        with pytest.raises(ValueError):
            pretrain_masked(self.CFG, [], TrainConfig(steps=1))
        with pytest.raises(ValueError):
            pretrain_masked(self.CFG, [[5, 6]], TrainConfig(steps=1), mask_rate=0.0)

    def test_head_untouched(self):
        params, _ = pretrain_masked(self.CFG, [[5, 6, 7]] * 4, TrainConfig(steps=5, batch=4, seed=2))
        fresh = init_params(self.CFG, 2)
        for k in ("head.wh", "head.w"):
            assert np.array_equal(params[k], fresh[k])


class TestFinetuneInit:
    def test_copy_and_fresh_head(self):
        pre = init_params(SMALL, 11)
        a = init_for_finetune(pre, 1)
        b = init_for_finetune(pre, 2)
        for k in encoder_keys(SMALL):
            assert np.array_equal(a[k], pre[k]) and np.array_equal(b[k], pre[k])
        assert not np.array_equal(a["head.wh"], pre["head.wh"])
        assert not np.array_equal(a["head.wh"], b["head.wh"])
        assert np.array_equal(a["head.wh"], init_for_finetune(pre, 1)["head.wh"])

    def test_hidden_states_preserved(self):
        pre = init_params(SMALL, 11)
        ft = init_for_finetune(pre, 3)
        b = Batch.stack([random_pair(np.random.default_rng(0), SMALL)])
        np.testing.assert_array_equal(encode_hidden(pre, b)[0], encode_hidden(ft, b)[0])

    def test_shape_mismatch(self):
        pre = init_params(SMALL, 11)
        with pytest.raises(ValueError):
            init_for_finetune(pre, 1, dataclasses.replace(SMALL, hidden=32))


def test_checkpoint_round_trip(tmp_path):
    params = init_params(SMALL, 9)
    save_params(params, tmp_path / "m.npz")
    back = load_params(tmp_path / "m.npz")
    assert back.config == params.config
    for k in params.tensors:
        assert np.array_equal(back[k], params[k])
