import math

import numpy as np
import pytest
from scipy.special import erf

from aslkit import autodiff as ad
from aslkit.network import Model, ModelConfig, make_batch, padded_length, sinusoidal_encoding


def tiny(mode="mq", **kw):
    base = dict(input_dims=(5,), proj_dims=(8,), embed_dim=8, heads=2, depth=1, levels=3, num_classes=3, mode=mode)
    if mode == "nlq":
        base.update(num_classes=1, text_dim=4)
    base.update(kw)
    return Model.init(ModelConfig(**base), seed=0)


# independent numpy oracle for one encoder block

def _ln(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def _softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _gelu(x):
    return 0.5 * x * (1 + erf(x / math.sqrt(2)))


def oracle_block(P, name, x, H):
    T, E = x.shape
    lin = lambda z, n: z @ P[n + ".w"] + P[n + ".b"]  # noqa: E731
    z = _ln(x, P[name + ".ln1.g"], P[name + ".ln1.b"])
    d = E // H
    q, k, v = (lin(z, f"{name}.tattn.{p}") for p in "qkv")
    heads = []
    for h in range(H):
        s = slice(h * d, (h + 1) * d)
        heads.append(_softmax(q[:, s] @ k[:, s].T / math.sqrt(d)) @ v[:, s])
    temporal = lin(np.concatenate(heads, axis=1), f"{name}.tattn.o")
    q, k, v = (lin(z, f"{name}.cattn.{p}") for p in "qkv")
    chans = []
    for h in range(H):
        s = slice(h * E, (h + 1) * E)
        a = _softmax(q[:, s].T @ k[:, s] / math.sqrt(T))  # E x E
        chans.append((a @ v[:, s].T).T)
    channel = lin(np.concatenate(chans, axis=1), f"{name}.cattn.o")
    y = x + 0.5 * (temporal + channel)
    f = lin(_gelu(lin(_ln(y, P[name + ".ln2.g"], P[name + ".ln2.b"]), name + ".ffn.fc1")), name + ".ffn.fc2")
    return y + f


def test_encoder_block_matches_stepwise_oracle():
    m = tiny(embed_dim=4, proj_dims=(4,))
    rng = np.random.default_rng(2)
    for p in m.params.values():
        p.data = rng.normal(size=p.shape) * 0.5
    x = rng.normal(size=(1, 3, 4))
    got = m.encoder_block(ad.constant(x), np.ones((1, 3), dtype=bool), "enc.0").data[0]
    P = {k: v.data for k, v in m.params.items()}
    np.testing.assert_allclose(got, oracle_block(P, "enc.0", x[0], 2), rtol=1e-12, atol=1e-12)


def test_single_step_temporal_attention_passes_values():
    rng = np.random.default_rng(0)
    q, k, v = (ad.constant(rng.normal(size=(1, 1, 3))) for _ in range(3))
    out, attn = ad.scaled_dot_attention(q, k, v)
    np.testing.assert_allclose(out.data, v.data)
    assert attn.data.item() == 1.0


def test_forward_shapes_and_heads():
    m = tiny()
    rng = np.random.default_rng(1)
    batch = make_batch([[rng.normal(size=(16, 5))], [rng.normal(size=(11, 5))]], 0.5, 3)
    out = m(batch)
    N = 16 + 8 + 4
    assert out.cls_logits.shape == (2, N, 3)
    assert out.offsets.shape == (2, N, 2)
    assert np.all(out.offsets.data > 0)
    assert out.point_mask.shape == (2, N)
    assert out.point_mask[1, :16].sum() == 11
    assert len(out.level_feats) == 3


def test_cls_bias_prior():
    m = tiny()
    np.testing.assert_allclose(m.params["head.cls.out.b"].data, -math.log(99.0))


def test_offsets_scale_with_stride_seconds():
    m = tiny()
    x = np.random.default_rng(3).normal(size=(16, 5))
    a = m(make_batch([[x]], 1.0, 3)).offsets.data
    b = m(make_batch([[x]], 2.5, 3)).offsets.data
    np.testing.assert_allclose(b, 2.5 * a, rtol=1e-12)


def test_padding_does_not_change_valid_outputs():
    m = tiny()
    x = np.random.default_rng(4).normal(size=(12, 5))
    alone = m(make_batch([[x]], 1.0, 3))
    padded = m(make_batch([[x]], 1.0, 3, pad_to=20))
    n0 = [12, 6, 3]
    n1 = [20, 10, 5]
    off0 = np.cumsum([0] + n0)
    off1 = np.cumsum([0] + n1)
    for lv in range(3):
        a = alone.cls_logits.data[0, off0[lv] : off0[lv + 1]]
        b = padded.cls_logits.data[0, off1[lv] : off1[lv] + n0[lv]]
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_masked_keys_receive_zero_attention():
    m = tiny()
    m.record_attention = True
    x = np.random.default_rng(5).normal(size=(10, 5))
    m(make_batch([[x]], 1.0, 3, pad_to=16))
    temporal = m._attn_log[0]  # (B, H, T, T) of the first encoder block
    assert np.all(temporal[..., 10:] == 0.0)


def test_text_token_permutation_invariance():
    m = tiny("nlq")
    rng = np.random.default_rng(6)
    x = rng.normal(size=(16, 5))
    tok = rng.normal(size=(5, 4))
    perm = rng.permutation(5)
    a = m(make_batch([[x]], 1.0, 3, tokens=[tok]))
    b = m(make_batch([[x]], 1.0, 3, tokens=[tok[perm]]))
    np.testing.assert_allclose(a.cls_logits.data, b.cls_logits.data, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(a.query_feat.data, b.query_feat.data, rtol=1e-10, atol=1e-12)


def test_nlq_requires_tokens():
    m = tiny("nlq")
    with pytest.raises(ValueError):
        m(make_batch([[np.zeros((16, 5))]], 1.0, 3))


def test_source_dim_mismatch():
    m = tiny()
    with pytest.raises(ValueError):
        m(make_batch([[np.zeros((16, 6))]], 1.0, 3))


def test_multi_source_projection_concatenates():
    m = Model.init(ModelConfig(input_dims=(3, 2), proj_dims=(4, 4), embed_dim=8, heads=2, depth=1, levels=2, num_classes=2))
    rng = np.random.default_rng(0)
    out = m(make_batch([[rng.normal(size=(8, 3)), rng.normal(size=(8, 2))]], 1.0, 2))
    assert out.cls_logits.shape == (1, 12, 2)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=8, proj_dims=(8,), heads=3)
    with pytest.raises(ValueError):
        ModelConfig(mode="nlq", num_classes=1, text_dim=0)
    with pytest.raises(ValueError):
        ModelConfig(proj_dims=(10,), embed_dim=64)


def test_padded_length_and_encoding():
    assert padded_length(13, 3) == 16
    assert padded_length(16, 3) == 16
    pe = sinusoidal_encoding(5, 6)
    assert pe.shape == (5, 6)
    np.testing.assert_allclose(pe[0, 1::2], 1.0)


def test_full_model_gradients_reach_every_parameter():
    m = tiny()
    rng = np.random.default_rng(8)
    out = m(make_batch([[rng.normal(size=(16, 5))]], 1.0, 3))
    ad.add(ad.sum_(out.cls_logits), ad.sum_(out.offsets)).backward()
    missing = [k for k, p in m.params.items() if p.grad is None]
    assert not missing
