import math

import numpy as np
import pytest

from eri.errors import ContractError, FormatError
from eri.model_zoo import (
    Model,
    forward,
    gradcheck_config,
    load_model,
    micro_config,
    paper_config,
    param_gradients,
    param_registry,
    positional_encoding,
    read_bundle,
    save_model,
)
from eri.model_zoo import autograd as ag
from eri.model_zoo import layers as L
from eri.model_zoo.autograd import Var
from eri.model_zoo.bundle import decode_bundle, encode_bundle
from eri.model_zoo.gradcheck import check_layer, check_model

TOL = dict(rtol=1e-4, atol=1e-6)


def rand(seed, *shape, scale=1.0):
    return np.random.default_rng(seed).normal(size=shape) * scale


def assert_grad_ok(res, allow_kinks=False):
    assert res.n_checked > 0
    assert not res.failures, res.failures[:5]
    if allow_kinks:
        # kinked coordinates cannot be compared; the smooth majority must be
        assert len(res.kinks) <= 0.1 * res.n_checked
    else:
        assert not res.kinks


# shape traces ---------------------------------------------------------------------


def test_transformer_trace_at_full_scale():
    cfg = paper_config("cnn_transformer")
    trace = []
    clip = np.random.default_rng(0).uniform(size=(1, 32, 112, 112, 3)).astype(np.float32)
    out = forward(cfg, Model(cfg).params, clip, trace=trace)
    # four stride-2 pools: 112 -> 7
    assert trace == [
        ("input", (32, 112, 112, 3)),
        ("backbone", (32, 7, 7, 64)),
        ("spatial_embed", (32, 7, 7, 256)),
        ("spatial_pool", (32, 256)),
        ("encoder1", (32, 256)),
        ("tcn", (32, 256)),
        ("encoder2", (32, 256)),
        ("temporal_pool", (256,)),
        ("dense", (64,)),
        ("head", (7,)),
    ]
    assert out.shape == (1, 7)


def test_lstm_trace_at_full_scale():
    cfg = paper_config("cnn_lstm")
    trace = []
    clip = np.random.default_rng(1).uniform(size=(1, 32, 112, 112, 3)).astype(np.float32)
    forward(cfg, Model(cfg).params, clip, trace=trace)
    assert trace == [
        ("input", (32, 112, 112, 3)),
        ("backbone", (32, 7, 7, 64)),
        ("spatial_pool", (32, 64)),
        ("lstm", (512,)),
        ("dense", (64,)),
        ("head", (7,)),
    ]


def test_single_clip_gives_seven_outputs():
    cfg = micro_config("cnn_transformer")
    m = Model(cfg)
    clip = np.random.default_rng(2).uniform(size=(4, 28, 28, 3))
    out = m.predict(clip)
    assert out.shape == (7,) and np.all((out > 0) & (out < 1))


def test_wrong_frame_size_is_rejected():
    cfg = micro_config("cnn_lstm")
    with pytest.raises(ContractError):
        Model(cfg).predict(np.zeros((1, 4, 30, 30, 3)))


# small oracles --------------------------------------------------------------------


def test_positional_encoding_values():
    pe = positional_encoding(2, 8)
    assert pe[0].tolist() == [0, 1, 0, 1, 0, 1, 0, 1]
    assert pe[1, 0] == pytest.approx(math.sin(1.0), abs=1e-15)
    assert pe[1, 1] == pytest.approx(math.cos(1.0), abs=1e-15)
    # column pair i=1 uses 10000^(2/8) = 10
    assert pe[1, 2] == pytest.approx(math.sin(0.1), abs=1e-15)


def attention_params(d, seed):
    P = {}
    for i, proj in enumerate(("query", "key", "value", "output")):
        P[f"a.{proj}.kernel"] = Var(rand(seed + i, d, d, scale=0.5))
        P[f"a.{proj}.bias"] = Var(rand(seed + 10 + i, d, scale=0.1))
    return P


def test_single_step_attention_is_value_then_output():
    d = 6
    P = attention_params(d, 3)
    x = rand(4, 2, 1, d)
    out, w = L.multi_head_attention(P, "a", Var(x), num_heads=3, return_weights=True)
    # one position: every softmax row is [1], so attention returns its value projection
    v = x @ P["a.value.kernel"].data + P["a.value.bias"].data
    expected = v @ P["a.output.kernel"].data + P["a.output.bias"].data
    assert np.allclose(out.data, expected, atol=1e-12)
    assert np.all(w == 1.0)


def test_attention_rows_sum_to_one():
    P = attention_params(8, 5)
    _, w = L.multi_head_attention(P, "a", Var(rand(6, 3, 5, 8)), num_heads=2, return_weights=True)
    assert w.shape == (3, 2, 5, 5)
    assert np.max(np.abs(w.sum(-1) - 1.0)) < 1e-6


def test_temporal_conv_identity_and_average():
    d, T = 3, 5
    x = np.abs(rand(7, 2, T, d))
    ident = np.zeros((3, d, d))
    ident[1] = np.eye(d)
    P = {"c.kernel": Var(ident), "c.bias": Var(np.zeros(d))}
    assert np.allclose(L.temporal_conv(P, "c", Var(x)).data, x)
    avg = np.stack([np.eye(d) / 3] * 3)
    P["c.kernel"] = Var(avg)
    y = L.temporal_conv(P, "c", Var(x), activation=False).data
    padded = np.pad(x, ((0, 0), (1, 1), (0, 0)))
    oracle = np.stack([(padded[:, t] + padded[:, t + 1] + padded[:, t + 2]) / 3 for t in range(T)], axis=1)
    assert np.allclose(y, oracle, atol=1e-12)


def test_zero_weights_give_one_half():
    for arch in ("cnn_lstm", "cnn_transformer"):
        cfg = gradcheck_config(arch)
        params = {k: np.zeros(s, np.float32) for k, s in param_registry(cfg).items()}
        out = Model(cfg, params).predict(np.random.default_rng(0).uniform(size=(3, 2, 8, 8, 3)))
        assert np.all(out == 0.5)


def test_backbone_zero_input_and_shared_frames():
    cfg = micro_config("cnn_transformer")
    params = Model(cfg, seed=3).params
    from eri.model_zoo import backbone_forward

    zero = backbone_forward(np.zeros((1, 4, 28, 28, 3), np.float32), cfg.backbone, params).data
    assert np.all(zero == 0)  # zero biases at init, ReLU(0) = 0
    frame = np.random.default_rng(4).uniform(size=(28, 28, 3)).astype(np.float32)
    same = backbone_forward(np.stack([frame] * 4)[None], cfg.backbone, params).data
    for t in range(1, 4):
        assert np.array_equal(same[0, t], same[0, 0])


def test_duplicated_batch_has_same_gradients():
    cfg = gradcheck_config("cnn_transformer")
    model = Model(cfg, seed=1)
    rng = np.random.default_rng(2)
    clips, y = rng.normal(size=(1, 2, 8, 8, 3)), rng.uniform(size=(1, 7))
    l1, g1 = param_gradients(model, clips, y, dtype=np.float64)
    l2, g2 = param_gradients(model, np.concatenate([clips] * 2), np.concatenate([y] * 2), dtype=np.float64)
    assert l1 == pytest.approx(l2, abs=1e-12)
    for k in g1:
        assert np.allclose(g1[k], g2[k], atol=1e-12)


def test_parameter_set_must_match_registry():
    cfg = gradcheck_config("cnn_lstm")
    params = Model(cfg).params
    with pytest.raises(ContractError, match="unregistered"):
        Model(cfg, {**params, "stray.kernel": np.zeros(1)})
    partial = dict(params)
    del partial["lstm.w_h"]
    with pytest.raises(ContractError, match="missing"):
        Model(cfg, partial)
    with pytest.raises(ContractError, match="expected shape"):
        Model(cfg, {**params, "lstm.bias": np.zeros(5)})


def test_forward_is_deterministic():
    cfg = micro_config("cnn_transformer")
    clips = np.random.default_rng(9).uniform(size=(2, 4, 28, 28, 3))
    a = Model(cfg, seed=5).predict(clips)
    b = Model(cfg, seed=5).predict(clips)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, Model(cfg, seed=6).predict(clips))


# isolated layer gradients --------------------------------------------------------


def test_grad_dense():
    res = check_layer(lambda P: L.dense(P, "d", P["x"]),
                      {"x": rand(0, 3, 4), "d.kernel": rand(1, 4, 5), "d.bias": rand(2, 5)}, **TOL)
    assert_grad_ok(res)


def test_grad_layer_norm():
    res = check_layer(lambda P: L.layer_norm(P, "n", P["x"]),
                      {"x": rand(0, 2, 3, 6), "n.gamma": rand(1, 6), "n.beta": rand(2, 6)}, **TOL)
    assert_grad_ok(res)


def test_grad_attention():
    d = 4
    inputs = {k: v.data for k, v in attention_params(d, 7).items()}
    inputs["x"] = rand(0, 2, 3, d)
    res = check_layer(lambda P: L.multi_head_attention(P, "a", P["x"], num_heads=2), inputs, **TOL)
    assert_grad_ok(res)


def test_grad_transformer_block():
    d, f = 4, 6
    inputs = {k.replace("a.", "b.attn.", 1): v.data for k, v in attention_params(d, 9).items()}
    inputs.update({
        "x": rand(0, 2, 3, d),
        "b.norm1.gamma": 1 + rand(1, d, scale=0.1), "b.norm1.beta": rand(2, d, scale=0.1),
        "b.norm2.gamma": 1 + rand(3, d, scale=0.1), "b.norm2.beta": rand(4, d, scale=0.1),
        "b.ff1.kernel": rand(5, d, f), "b.ff1.bias": rand(6, f),
        "b.ff2.kernel": rand(7, f, d), "b.ff2.bias": rand(8, d),
    })
    res = check_layer(lambda P: L.transformer_block(P, "b", P["x"], num_heads=2), inputs, **TOL)
    assert_grad_ok(res, allow_kinks=True)


def test_grad_lstm():
    H, d = 3, 2
    inputs = {"x": rand(0, 2, 4, d), "r.w_x": rand(1, d, 4 * H), "r.w_h": rand(2, H, 4 * H),
              "r.bias": rand(3, 4 * H)}
    assert_grad_ok(check_layer(lambda P: L.lstm(P, "r", P["x"]), inputs, **TOL))


def test_grad_temporal_conv():
    inputs = {"x": rand(0, 2, 5, 3), "t.kernel": rand(1, 3, 3, 3), "t.bias": rand(2, 3)}
    assert_grad_ok(check_layer(lambda P: L.temporal_conv(P, "t", P["x"]), inputs, **TOL), allow_kinks=True)


def test_grad_conv_block():
    inputs = {"x": rand(0, 2, 6, 6, 2), "c.kernel": rand(1, 3, 3, 2, 3), "c.bias": rand(2, 3)}
    assert_grad_ok(check_layer(lambda P: L.conv_block(P, "c", P["x"]), inputs, **TOL), allow_kinks=True)


def test_grad_spatial_embed_and_pool():
    inputs = {"x": rand(0, 2, 3, 2, 2, 4), "e.kernel": rand(1, 4, 5), "e.bias": rand(2, 5)}
    res = check_layer(lambda P: L.spatial_pool(L.spatial_embed(P, "e", P["x"])), inputs, **TOL)
    assert_grad_ok(res)


@pytest.mark.parametrize("fn", [ag.sigmoid, ag.tanh, ag.relu, lambda v: ag.softmax(v, axis=-1)])
def test_grad_pointwise(fn):
    assert_grad_ok(check_layer(lambda P: fn(P["x"]), {"x": rand(3, 4, 5)}, **TOL))


@pytest.mark.parametrize("arch", ["cnn_lstm", "cnn_transformer"])
def test_full_model_gradients(arch):
    res = check_model(gradcheck_config(arch), model_seed=0, data_seed=10, **TOL)
    assert res.n_checked == sum(int(np.prod(s)) for s in param_registry(gradcheck_config(arch)).values())
    assert_grad_ok(res)


# bundles --------------------------------------------------------------------------


def test_bundle_round_trip_is_bit_exact(tmp_path):
    for arch in ("cnn_lstm", "cnn_transformer"):
        m = Model(micro_config(arch), seed=4)
        save_model(tmp_path / arch, m)
        back = load_model(tmp_path / arch, expect_arch=arch)
        assert back.config == m.config
        assert list(back.params) == list(param_registry(m.config))
        for k in m.params:
            assert back.params[k].tobytes() == m.params[k].tobytes()
        blob = (tmp_path / arch).read_bytes()
        name, meta, tensors = decode_bundle(blob)
        assert encode_bundle(name, tensors, meta) == blob


def test_bundle_architecture_mismatch_and_corruption(tmp_path):
    m = Model(gradcheck_config("cnn_lstm"))
    save_model(tmp_path / "w", m)
    with pytest.raises(FormatError, match="expected cnn_transformer"):
        load_model(tmp_path / "w", expect_arch="cnn_transformer")
    blob = (tmp_path / "w").read_bytes()
    with pytest.raises(FormatError):
        decode_bundle(blob[:-3])
    with pytest.raises(FormatError):
        decode_bundle(b"NOPE" + blob[4:])
    arch, _, _ = read_bundle(tmp_path / "w")
    assert arch == "cnn_lstm"
