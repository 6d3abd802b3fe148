import math

import numpy as np
import pytest

from reusekd.encoder import (
    AttentionWeights,
    ConfigurationError,
    Encoder,
    EncoderConfig,
    EncoderModel,
    encoder_forward,
    load_checkpoint,
    load_model,
    mhsa_forward,
    reuse_mhsa_forward,
    save_model,
)
from reusekd.reuse import ReusePattern, parse_pattern
from reusekd.rng import Rng
from reusekd.tensor import ShapeError, Tensor, grad_check, l2_rows


# -- naive per-element oracle (independent of the tensor library) -------------


def naive_mhsa(x, weights):
    """Attention computed with explicit python loops over frames/heads."""
    n, d = x.shape
    heads_out = []
    maps = []
    num_heads = len(weights.value)
    for h in range(num_heads):
        wq, wk = weights.query[h].data, weights.key[h].data
        wv = weights.value[h].data
        bq = weights.query_bias[h].data if weights.query_bias else 0.0
        bk = weights.key_bias[h].data if weights.key_bias else 0.0
        bv = weights.value_bias[h].data if weights.value_bias else 0.0
        dk = wq.shape[1]
        q = np.array([[sum(x[i, a] * wq[a, b] for a in range(d)) for b in range(dk)]
                      for i in range(n)]) + bq
        k = np.array([[sum(x[i, a] * wk[a, b] for a in range(d)) for b in range(dk)]
                      for i in range(n)]) + bk
        v = np.array([[sum(x[i, a] * wv[a, b] for a in range(d))
                       for b in range(wv.shape[1])] for i in range(n)]) + bv
        amap = np.zeros((n, n))
        for i in range(n):
            logits = [sum(q[i, c] * k[j, c] for c in range(dk)) / math.sqrt(dk)
                      for j in range(n)]
            mx = max(logits)
            exps = [math.exp(l - mx) for l in logits]
            s = sum(exps)
            amap[i] = [e / s for e in exps]
        heads_out.append(amap @ v)
        maps.append(amap)
    concat = np.concatenate(heads_out, axis=1)
    out = concat @ weights.out_proj.data
    if weights.out_bias is not None:
        out = out + weights.out_bias.data
    return out, maps


def make_weights(config, reusing, seed):
    from reusekd.encoder import _init_attention

    return _init_attention(config, reusing, Rng(seed))


TOY = EncoderConfig(num_layers=2, model_width=8, num_heads=2, ffn_width=16,
                    max_seq_len=16)


def test_single_frame_map_is_one():
    w = make_weights(TOY, reusing=False, seed=0)
    x = Tensor(Rng(1).normal((1, 8)))
    _, maps = mhsa_forward(x, w)
    for a in maps:
        np.testing.assert_array_equal(a.data, [[1.0]])


def test_zero_key_query_gives_uniform_attention():
    cfg = EncoderConfig(num_layers=1, model_width=6, num_heads=1, ffn_width=8)
    w = make_weights(cfg, reusing=False, seed=3)
    for t in w.query + w.key:
        t.data[:] = 0.0
    x = Tensor(Rng(4).normal((5, 6)))
    out, maps = mhsa_forward(x, w)
    np.testing.assert_allclose(maps[0].data, 1.0 / 5, atol=1e-15)
    v = x.data @ w.value[0].data + w.value_bias[0].data
    expected = np.repeat(v.mean(axis=0, keepdims=True), 5, axis=0) @ w.out_proj.data \
        + w.out_bias.data
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_mhsa_matches_naive_oracle():
    cfg = EncoderConfig(num_layers=1, model_width=8, num_heads=2, ffn_width=8)
    w = make_weights(cfg, reusing=False, seed=42)
    x = Tensor(Rng(42).normal((6, 8)))
    out, maps = mhsa_forward(x, w)
    ref_out, ref_maps = naive_mhsa(x.data, w)
    np.testing.assert_allclose(out.data, ref_out, atol=1e-10)
    for a, r in zip(maps, ref_maps):
        np.testing.assert_allclose(a.data, r, atol=1e-10)


def test_reuse_with_identity_maps_is_value_passthrough():
    cfg = EncoderConfig(num_layers=1, model_width=8, num_heads=2, ffn_width=8)
    w = make_weights(cfg, reusing=True, seed=5)
    x = Tensor(Rng(6).normal((4, 8)))
    eye = [Tensor(np.eye(4)) for _ in range(2)]
    out = reuse_mhsa_forward(x, w, eye)
    v = np.concatenate([x.data @ w.value[h].data + w.value_bias[h].data
                        for h in range(2)], axis=1)
    np.testing.assert_allclose(out.data, v @ w.out_proj.data + w.out_bias.data,
                               atol=1e-12)


def test_reuse_of_own_maps_reproduces_mhsa_exactly():
    cfg = EncoderConfig(num_layers=1, model_width=8, num_heads=2, ffn_width=8)
    w = make_weights(cfg, reusing=False, seed=7)
    x = Tensor(Rng(8).normal((6, 8)))
    out, maps = mhsa_forward(x, w)
    w_reuse = AttentionWeights(query=None, key=None, value=w.value,
                               out_proj=w.out_proj, value_bias=w.value_bias,
                               out_bias=w.out_bias)
    reused = reuse_mhsa_forward(x, w_reuse, maps)
    assert reused.data.tobytes() == out.data.tobytes()


def test_reuse_mhsa_matches_naive_oracle():
    cfg = EncoderConfig(num_layers=1, model_width=8, num_heads=2, ffn_width=8)
    w = make_weights(cfg, reusing=False, seed=9)
    x = Tensor(Rng(10).normal((6, 8)))
    _, ref_maps = naive_mhsa(x.data, w)
    w_reuse = AttentionWeights(query=None, key=None, value=w.value,
                               out_proj=w.out_proj, value_bias=w.value_bias,
                               out_bias=w.out_bias)
    out = reuse_mhsa_forward(x, w_reuse, [Tensor(m) for m in ref_maps])
    per_head = [m @ (x.data @ w.value[h].data + w.value_bias[h].data)
                for h, m in enumerate(ref_maps)]
    expected = np.concatenate(per_head, axis=1) @ w.out_proj.data + w.out_bias.data
    np.testing.assert_allclose(out.data, expected, atol=1e-10)


def test_reuse_shape_errors():
    cfg = EncoderConfig(num_layers=1, model_width=8, num_heads=2, ffn_width=8)
    w = make_weights(cfg, reusing=True, seed=11)
    x = Tensor(Rng(12).normal((4, 8)))
    with pytest.raises(ShapeError, match="2 maps"):
        reuse_mhsa_forward(x, w, [Tensor(np.eye(4))])
    with pytest.raises(ShapeError):
        reuse_mhsa_forward(x, w, [Tensor(np.eye(3)) for _ in range(2)])
    compute_w = make_weights(cfg, reusing=False, seed=13)
    with pytest.raises(ConfigurationError):
        reuse_mhsa_forward(x, compute_w, [Tensor(np.eye(4)) for _ in range(2)])
    with pytest.raises(ConfigurationError):
        mhsa_forward(x, w)


# -- full stack ----------------------------------------------------------------


def test_all_compute_has_no_reused_from():
    enc = Encoder(TOY, ReusePattern.all_compute(2), Rng(1))
    states = enc.forward(Tensor(Rng(2).normal((5, 8))))
    assert [s.reused_from for s in states] == [None, None]


def test_2by6_reused_from_chain():
    cfg = EncoderConfig(num_layers=12, model_width=8, num_heads=2, ffn_width=16,
                        max_seq_len=8)
    enc = Encoder(cfg, parse_pattern("2by6", 12), Rng(3))
    states = enc.forward(Tensor(Rng(4).normal((4, 8))))
    expected = [None, 1, None, 3, None, 5, None, 7, None, 9, None, 11]
    assert [s.reused_from for s in states] == expected


def test_attention_map_rows_are_distributions():
    enc = Encoder(TOY, parse_pattern([0, 1], 2), Rng(5))
    states = enc.forward(Tensor(Rng(6).normal((7, 8))))
    for s in states:
        for a in s.attention_maps:
            assert np.all(a.data >= 0)
            np.testing.assert_allclose(a.data.sum(axis=1), 1.0, atol=1e-9)


def test_reusing_layer_shares_map_buffers():
    enc = Encoder(TOY, parse_pattern([0, 1], 2), Rng(7))
    x = Tensor(Rng(8).normal((5, 8)))
    states = enc.forward(x)
    for a, b in zip(states[0].attention_maps, states[1].attention_maps):
        assert a is b
    # perturbing the source's query weights moves both layers' maps identically
    enc.layers[0].attention.query[0].data += 0.25
    states2 = enc.forward(x)
    assert not np.array_equal(states2[0].attention_maps[0].data,
                              states[0].attention_maps[0].data)
    for a, b in zip(states2[0].attention_maps, states2[1].attention_maps):
        assert a is b


def test_reusing_layers_carry_no_key_query_tensors():
    enc = Encoder(TOY, parse_pattern([0, 1], 2), Rng(9))
    names = [n for n, _ in enc.named_parameters()]
    assert not any(n.startswith("layers.1.attn.q") or n.startswith("layers.1.attn.k")
                   for n in names)
    assert any(n.startswith("layers.0.attn.q.") for n in names)


def test_pattern_config_mismatch():
    with pytest.raises(ConfigurationError):
        Encoder(TOY, ReusePattern.all_compute(3), Rng(0))
    enc = Encoder(TOY, ReusePattern.all_compute(2), Rng(0))
    with pytest.raises(ConfigurationError):
        encoder_forward(Tensor(np.zeros((4, 8))), TOY, ReusePattern.all_compute(3),
                        enc.layers, enc.pos_embedding)


def test_sequence_longer_than_max_rejected():
    enc = Encoder(TOY, ReusePattern.all_compute(2), Rng(0))
    with pytest.raises(ConfigurationError, match="max_seq_len"):
        enc.forward(Tensor(np.zeros((17, 8))))


def test_gradient_flows_through_reused_map_into_source_kq():
    cfg = EncoderConfig(num_layers=2, model_width=6, num_heads=2, ffn_width=8,
                        max_seq_len=8)
    enc = Encoder(cfg, parse_pattern([0, 1], 2), Rng(21))
    x = Tensor(Rng(22).normal((5, 6)))

    def loss_from_reusing_layer_only(_):
        states = enc.forward(x)
        return l2_rows(states[1].hidden).mean()

    source_kq = enc.layers[0].attention.query + enc.layers[0].attention.key
    err = grad_check(loss_from_reusing_layer_only, source_kq, epsilon=1e-5)
    assert err < 1e-4
    # and the gradient is actually nonzero, i.e. the reuse path is live
    for t in source_kq:
        t.grad = None
    out = loss_from_reusing_layer_only(None)
    out.backward()
    assert any(np.abs(t.grad).max() > 0 for t in source_kq)


def test_full_two_layer_encoder_gradient():
    cfg = EncoderConfig(num_layers=2, model_width=16, num_heads=2, ffn_width=32,
                        max_seq_len=8)
    enc = Encoder(cfg, parse_pattern([0, 1], 2), Rng(31))
    x = Tensor(Rng(32).normal((8, 16)))

    def loss(_):
        return l2_rows(enc.forward(x)[-1].hidden).mean()

    err = grad_check(loss, enc.parameters(), epsilon=1e-5)
    assert err < 1e-4


# -- model wrapper and checkpoints ----------------------------------------------


def test_model_forward_masks_with_own_embedding():
    from reusekd.masking import sample_mask

    cfg = EncoderConfig(num_layers=2, model_width=8, num_heads=2, ffn_width=16,
                        input_width=5, max_seq_len=32)
    model = EncoderModel(cfg, ReusePattern.all_compute(2), Rng(41))
    frames = Tensor(Rng(42).normal((20, 5)))
    plan = sample_mask(20, 0.3, 2, Rng(43))
    clean = model.forward(frames)
    masked = model.forward(frames, plan)
    assert len(clean) == 2
    assert not np.array_equal(clean[-1].hidden.data, masked[-1].hidden.data)
    with pytest.raises(ConfigurationError):
        model.forward(Tensor(np.zeros((4, 7))))


def test_checkpoint_round_trip_bytes_and_values(tmp_path):
    cfg = EncoderConfig(num_layers=2, model_width=8, num_heads=2, ffn_width=16,
                        input_width=5, max_seq_len=16)
    model = EncoderModel(cfg, parse_pattern([0, 1], 2), Rng(51))
    path = tmp_path / "model.ckpt"
    save_model(path, model)
    loaded, leftovers = load_model(path)
    assert leftovers == {}
    for (na, a), (nb, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert na == nb
        assert a.data.tobytes() == b.data.tobytes()
    path2 = tmp_path / "model2.ckpt"
    save_model(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()
    x = Tensor(Rng(52).normal((6, 5)))
    out_a = model.forward(x)[-1].hidden.data
    out_b = loaded.forward(x)[-1].hidden.data
    assert out_a.tobytes() == out_b.tobytes()


def test_checkpoint_header_is_self_describing(tmp_path):
    cfg = EncoderConfig(num_layers=1, model_width=4, num_heads=1, ffn_width=8,
                        max_seq_len=4)
    model = EncoderModel(cfg, ReusePattern.all_compute(1), Rng(61))
    path = tmp_path / "m.ckpt"
    save_model(path, model)
    config, pattern, arrays = load_checkpoint(path)
    assert config == cfg
    assert pattern.directives == (0,)
    assert "encoder.layers.0.ffn.w1" in arrays


def test_copy_weights_from():
    cfg = EncoderConfig(num_layers=1, model_width=4, num_heads=1, ffn_width=8,
                        max_seq_len=4)
    a = EncoderModel(cfg, ReusePattern.all_compute(1), Rng(71))
    b = EncoderModel(cfg, ReusePattern.all_compute(1), Rng(72))
    b.copy_weights_from(a)
    x = Tensor(Rng(73).normal((3, 4)))
    assert a.forward(x)[-1].hidden.data.tobytes() == \
        b.forward(x)[-1].hidden.data.tobytes()
