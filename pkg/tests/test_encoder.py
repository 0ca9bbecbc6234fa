import numpy as np
import pytest

from taskembed import encoder as enc
from taskembed import tensor as T
from taskembed.encoder import (CLS, MASK, N_SPECIAL, SEP, EncoderConfig, EncoderWeights, TokenBatch,
                               attention_weights, build_sequence, encode, mask_tokens, mlm_pretrain)
from taskembed.tensor import Tensor

from conftest import TINY


def test_build_sequence_layout():
    assert build_sequence([(7, 8), (9,)]) == [CLS, 7, 8, SEP, 9, SEP]
    with pytest.raises(ValueError):
        build_sequence([])


def test_shapes(tiny_encoder, tiny_batch):
    states, h_cls = encode(tiny_batch, tiny_encoder)
    assert states.shape == (3, tiny_batch.ids.shape[1], TINY.hidden)
    assert h_cls.shape == (3, TINY.hidden)
    np.testing.assert_array_equal(h_cls.data, states.data[:, 0])


def test_padding_does_not_leak(tiny_encoder):
    short = TokenBatch.from_sequences([[CLS, 9, 10, SEP]])
    padded = TokenBatch.from_sequences([[CLS, 9, 10, SEP], [CLS, 11, 12, 13, 14, 15, SEP]])
    a, _ = encode(short, tiny_encoder)
    b, _ = encode(padded, tiny_encoder)
    np.testing.assert_allclose(a.data[0], b.data[0, :4], atol=1e-12)


def test_single_token_attention_is_value_projection():
    cfg = EncoderConfig(num_layers=1, num_heads=1, hidden=8, ffn=16, vocab_size=32, max_len=4)
    w = EncoderWeights.init(cfg, 0)
    batch = TokenBatch.from_sequences([[CLS]])
    att = attention_weights(batch, w, 0)
    np.testing.assert_allclose(att[..., 0, 0], 1.0)
    x = enc._embed(batch, w)
    out = enc._attention(x, w, 0, enc._mask_bias(batch))
    p = {k: v.data for k, v in w.params.items()}
    expected = (x.data @ p["l0.v.w"] + p["l0.v.b"]) @ p["l0.o.w"] + p["l0.o.b"]
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_rejects_long_sequences(tiny_encoder):
    with pytest.raises(ValueError):
        TokenBatch.from_sequences([[CLS] + [9] * 20], TINY.max_len)


def test_rejects_unknown_token(tiny_encoder):
    with pytest.raises(IndexError):
        encode(TokenBatch.from_sequences([[CLS, 400, SEP]]), tiny_encoder)


def test_mask_rate():
    rng = np.random.default_rng(0)
    ids = rng.integers(N_SPECIAL, 200, size=(1000, 20))
    ids[:, 0] = CLS
    _, selected = mask_tokens(ids, rng, 200)
    eligible = ids >= N_SPECIAL
    assert abs(selected.sum() / eligible.sum() - 0.15) < 0.02
    assert not selected[:, 0].any()


def test_mask_corruption_split():
    rng = np.random.default_rng(1)
    ids = rng.integers(N_SPECIAL, 200, size=(2000, 20))
    corrupted, selected = mask_tokens(ids, rng, 200)
    frac_mask = (corrupted[selected] == MASK).mean()
    assert abs(frac_mask - 0.8) < 0.03


def test_pretrain_zero_steps_is_frozen_init():
    w = mlm_pretrain([[CLS, 9, SEP]], TINY, steps=0, seed=4)
    ref = EncoderWeights.init(TINY, 4)
    assert w.frozen
    assert w.digest() == ref.digest()


def test_pretrain_reduces_loss():
    rng = np.random.default_rng(0)
    # two interleaved "languages" with predictable neighbours
    corpus = []
    for _ in range(200):
        base = int(rng.integers(0, 2))
        corpus.append([CLS] + [10 + base * 10 + (j % 4) for j in range(8)] + [SEP])
    w = mlm_pretrain(corpus, TINY, steps=150, seed=0, batch_size=16, lr=3e-3)
    loss = w.manifest["mlm_loss"]
    assert np.mean(loss[-20:]) < np.mean(loss[:20])


def test_gradient_through_encoder():
    cfg = EncoderConfig(num_layers=2, num_heads=2, hidden=8, ffn=16, vocab_size=24, max_len=6)
    w = EncoderWeights.init(cfg, 1)
    for p in w.params.values():
        p.data = p.data * 20.0 if p.data.std() > 0 else p.data
    batch = TokenBatch.from_sequences([[CLS, 7, 9, SEP], [CLS, 11, SEP]])

    def loss():
        _, h = encode(batch, w)
        return T.cross_entropy(h, [0, 3])

    params = [w.params[k] for k in ("tok_emb", "l0.q.w", "l1.ff1.w", "l1.ln2.g", "pos_emb")]
    assert T.finite_difference_check(loss, params, eps=1e-5) <= 1e-5


def test_copy_is_independent(tiny_encoder):
    c = tiny_encoder.copy()
    c.params["tok_emb"].data[0, 0] += 1.0
    assert c.digest() != tiny_encoder.digest()


def test_frozen_encoder_has_no_grads(tiny_encoder, tiny_batch):
    _, h = encode(tiny_batch, tiny_encoder)
    out = Tensor(np.ones(1), requires_grad=True) * h.sum()
    out.sum().backward()
    assert all(p.grad is None for p in tiny_encoder.params.values())
