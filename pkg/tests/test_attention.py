import math

import numpy as np
import pytest

from maq2l import tensor as T
from maq2l.attention import (Decoder, Encoder, LogitProbe, MultiHeadAttention,
                             sinusoidal_grid)
from maq2l.errors import ConfigError, ShapeError


def _identity_mha(d):
    mha = MultiHeadAttention(d, 1, np.random.default_rng(0))
    eye = np.eye(d)
    for lin in (mha.wq, mha.wk, mha.wv, mha.wo):
        lin.weight.data = eye.copy()
    return mha


def test_positional_table_is_deterministic():
    a = sinusoidal_grid(3, 4, 8)
    b = sinusoidal_grid(3, 4, 8)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (12, 8)


def test_positional_table_requires_divisible_dim():
    with pytest.raises(ConfigError):
        sinusoidal_grid(2, 2, 6)


def test_single_key_attention_returns_value():
    mha = _identity_mha(2)
    rng = np.random.default_rng(1)
    q = T.tensor(rng.uniform(-3, 3, (4, 2)))
    k = T.tensor(rng.uniform(-3, 3, (1, 2)))
    v = T.tensor(rng.uniform(-3, 3, (1, 2)))
    out = mha(q, k, v)
    np.testing.assert_allclose(out.data, np.repeat(v.data, 4, axis=0), atol=1e-12)


def test_zero_mask_matches_unmasked():
    rng = np.random.default_rng(2)
    mha = MultiHeadAttention(8, 2, rng)
    q = T.tensor(rng.uniform(-1, 1, (3, 8)))
    k = T.tensor(rng.uniform(-1, 1, (5, 8)))
    v = T.tensor(rng.uniform(-1, 1, (5, 8)))
    base = mha(q, k, v).data
    masked = mha(q, k, v, mask=T.zeros((3, 5))).data
    np.testing.assert_allclose(masked, base, atol=1e-12)


def test_single_head_matches_scalar_oracle():
    """Direct evaluation of softmax(QK^T/sqrt(d))V with identity projections."""
    mha = _identity_mha(2)
    q = np.array([[1.0, 0.5], [-0.5, 2.0]])
    k = np.array([[0.3, -1.0], [1.5, 0.2]])
    v = np.array([[2.0, 1.0], [0.0, -1.0]])
    out = mha(T.tensor(q), T.tensor(k), T.tensor(v)).data

    scores = q @ k.T / math.sqrt(2.0)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    attn = e / e.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out, attn @ v, atol=1e-12)


def test_attention_rows_are_distributions_under_large_masks():
    rng = np.random.default_rng(3)
    mha = MultiHeadAttention(8, 2, rng)
    q = T.tensor(rng.uniform(-1, 1, (4, 8)))
    k = T.tensor(rng.uniform(-1, 1, (6, 8)))
    mask = T.tensor(rng.uniform(-1e3, 1e3, (4, 6)))
    mha(q, k, k, mask=mask)
    for head_rows in mha.last_weights:
        np.testing.assert_allclose(head_rows.sum(axis=1), np.ones(4), atol=1e-12)


def test_mask_shape_mismatch_rejected():
    mha = MultiHeadAttention(4, 1, np.random.default_rng(4))
    q, k = T.zeros((3, 4)), T.zeros((5, 4))
    with pytest.raises(ShapeError):
        mha(q, k, k, mask=T.zeros((3, 4)))


def test_heads_must_divide_d_model():
    with pytest.raises(ConfigError):
        MultiHeadAttention(6, 4, np.random.default_rng(5))


def test_token_embed_hand_case():
    enc = Encoder(c_in=2, d_model=1, heads=1, layers=0, ffn_mult=1,
                  dropout=0.0, rng=np.random.default_rng(6))
    enc.te.weight.data = np.array([[1.0], [1.0]])
    x = np.zeros((2, 2, 2))
    x[0, 1, 0] = 3.0
    x[1, 1, 0] = 4.0
    tokens = enc.token_embed(T.tensor(x))
    assert tokens.shape == (4, 1)
    assert tokens.data[2, 0] == 7.0  # flattened position (1,0)


def test_token_embed_zero_features():
    enc = Encoder(2, 4, 1, 0, 1, 0.0, np.random.default_rng(7))
    tokens = enc.token_embed(T.zeros((2, 3, 3)))
    np.testing.assert_array_equal(tokens.data, np.zeros((9, 4)))


def test_encode_output_shape_and_determinism():
    rng = np.random.default_rng(8)
    enc = Encoder(5, 8, 2, 2, 2, 0.3, rng)
    x = T.tensor(rng.uniform(-1, 1, (5, 4, 4)))
    a = enc(x, train=False).data
    b = enc(x, train=False).data
    assert a.shape == (16, 8)
    np.testing.assert_array_equal(a, b)


def test_encode_with_zeroed_residual_paths_reduces_to_norms():
    rng = np.random.default_rng(9)
    enc = Encoder(3, 8, 2, 1, 2, 0.0, rng)
    layer = enc.layers[0]
    layer.attn.wo.weight.data = np.zeros((8, 8))
    layer.ffn.fc2.weight.data = np.zeros((16, 8))
    layer.ffn.fc2.bias.data = np.zeros(8)
    x = T.tensor(rng.uniform(-1, 1, (3, 2, 2)))
    got = enc(x, train=False).data

    def norm_rows(m, gain, bias):
        mu = m.mean(axis=1, keepdims=True)
        var = m.var(axis=1, keepdims=True)
        return (m - mu) / np.sqrt(var + 1e-5) * gain + bias

    te = x.data.reshape(3, 4).T @ enc.te.weight.data
    expect = norm_rows(te, layer.norm1.gain.data, layer.norm1.bias.data)
    expect = norm_rows(expect, layer.norm2.gain.data, layer.norm2.bias.data)
    np.testing.assert_allclose(got, expect, atol=1e-12)


def _decoder_oracle(dec, f_enc, a1, pos):
    """Step-by-step numpy evaluation of one decoder layer."""

    def norm_rows(m, ln):
        mu = m.mean(axis=1, keepdims=True)
        var = m.var(axis=1, keepdims=True)
        return (m - mu) / np.sqrt(var + 1e-5) * ln.gain.data + ln.bias.data

    def attn(block, q_in, k_in, v_in, mask=None):
        qp = q_in @ block.wq.weight.data
        kp = k_in @ block.wk.weight.data
        vp = v_in @ block.wv.weight.data
        scores = qp @ kp.T / math.sqrt(block.d_head)
        if mask is not None:
            scores = scores + mask
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        w = e / e.sum(axis=1, keepdims=True)
        return (w @ vp) @ block.wo.weight.data

    layer = dec.layers[0]
    q = dec.label_embedding.data
    ca = attn(layer.cross, q, f_enc + pos, f_enc, mask=a1.T)
    qt = norm_rows(q + ca, layer.norm1)
    sa = attn(layer.self_attn, qt, qt, qt)
    qt1 = norm_rows(qt + sa, layer.norm2)
    h = np.maximum(qt1 @ layer.ffn.fc1.weight.data + layer.ffn.fc1.bias.data, 0.0)
    ff = h @ layer.ffn.fc2.weight.data + layer.ffn.fc2.bias.data
    return norm_rows(qt1 + ff, layer.norm3)


def test_decode_single_layer_matches_equation_oracle():
    rng = np.random.default_rng(10)
    dec = Decoder(n_labels=2, d_model=4, heads=1, layers=1, ffn_mult=2,
                  dropout=0.0, rng=rng)
    f_enc = rng.uniform(-1, 1, (2, 4))
    a1 = rng.uniform(-1, 1, (2, 2))
    pos = sinusoidal_grid(1, 2, 4)
    got = dec(T.tensor(f_enc), attn_mask=T.tensor(a1), grid_hw=(1, 2)).data
    expect = _decoder_oracle(dec, f_enc, a1, pos)
    np.testing.assert_allclose(got, expect, atol=1e-10)


def test_decode_zero_mask_equals_unmasked():
    rng = np.random.default_rng(11)
    for draw in range(10):
        dec = Decoder(3, 8, 2, 2, 2, 0.0, np.random.default_rng(100 + draw))
        f_enc = T.tensor(rng.uniform(-1, 1, (4, 8)))
        base = dec(f_enc, attn_mask=None, grid_hw=(2, 2)).data
        masked = dec(f_enc, attn_mask=T.zeros((4, 3)), grid_hw=(2, 2)).data
        np.testing.assert_allclose(masked, base, atol=1e-12)


def test_decode_label_permutation_equivariance():
    rng = np.random.default_rng(12)
    dec = Decoder(4, 8, 2, 2, 2, 0.0, rng)
    f_enc = T.tensor(rng.uniform(-1, 1, (4, 8)))
    a1 = rng.uniform(-2, 2, (4, 4))
    base = dec(f_enc, attn_mask=T.tensor(a1), grid_hw=(2, 2)).data

    perm = [3, 1, 0, 2]
    dec_p = Decoder(4, 8, 2, 2, 2, 0.0, np.random.default_rng(12))
    # rebuild with identical weights, then permute the label rows
    for (ka, va), (kb, vb) in zip(sorted(dec.parameters().items()),
                                  sorted(dec_p.parameters().items())):
        assert ka == kb
        vb.data = va.data.copy()
    dec_p.label_embedding.data = dec.label_embedding.data[perm]
    got = dec_p(f_enc, attn_mask=T.tensor(a1[:, perm]), grid_hw=(2, 2)).data
    np.testing.assert_array_equal(got, base[perm])


def test_decode_mask_label_count_mismatch():
    dec = Decoder(3, 8, 2, 1, 2, 0.0, np.random.default_rng(13))
    with pytest.raises(ShapeError):
        dec(T.zeros((4, 8)), attn_mask=T.zeros((4, 5)), grid_hw=(2, 2))


def test_project_logits_hand_case():
    probe = LogitProbe(1, 2, np.random.default_rng(14))
    probe.weight.data = np.array([[3.0, -1.0]])
    probe.bias.data = np.array([0.5])
    out = probe(T.tensor([[1.0, 2.0]]))
    np.testing.assert_allclose(out.data, [1.5])


def test_project_logits_zero_inputs():
    probe = LogitProbe(3, 4, np.random.default_rng(15))
    probe.bias.data = np.zeros(3)
    np.testing.assert_array_equal(probe(T.zeros((3, 4))).data, np.zeros(3))


def test_project_logits_locality():
    rng = np.random.default_rng(16)
    probe = LogitProbe(3, 4, rng)
    q = rng.uniform(-1, 1, (3, 4))
    base = probe(T.tensor(q)).data
    q_zeroed = q.copy()
    q_zeroed[1:] = 0.0
    assert probe(T.tensor(q_zeroed)).data[0] == base[0]
