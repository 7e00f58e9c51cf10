import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emgup.autodiff import DimensionError, Tensor, no_grad, softmax
from emgup.data import ConfigurationError
from emgup.model import (
    Backbone,
    BackboneConfig,
    CheckpointError,
    causal_attention,
    conv_out_length,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    parameter_manifest,
    save_checkpoint,
)
from emgup.ssa import build_views, cross_view_loss

SMALL = dict(channels=3, window_length=32, conv_blocks=[(8, 5, 2), (8, 3, 1)], latent_dim=8,
             encoder_layers=1, encoder_heads=2, context_window=5, prediction_horizons=3, num_classes=4)


def small(**kw):
    return BackboneConfig(**{**SMALL, **kw})


@pytest.fixture
def model():
    return Backbone(small(), seed=3)


def window(cfg, seed=0, batch=None):
    shape = (cfg.channels, cfg.window_length) if batch is None else (batch, cfg.channels, cfg.window_length)
    return np.random.default_rng(seed).normal(size=shape)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_default_latent_length():
    cfg = BackboneConfig()
    n = 64
    for _, w, s in cfg.conv_blocks:
        n = (n - w) // s + 1
    assert cfg.latent_length == n == 23


def test_config_rejects_short_latent_sequence():
    with pytest.raises(ConfigurationError, match="latent length"):
        BackboneConfig(window_length=40)


def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigurationError, match="divisible"):
        small(latent_dim=9, conv_blocks=[(8, 5, 2), (9, 3, 1)], encoder_heads=2)


def test_config_text_round_trip():
    cfg = small()
    assert BackboneConfig.from_text(cfg.to_text()) == cfg


def test_manifest_names_unique():
    names = [n for n, _ in parameter_manifest(BackboneConfig())]
    assert len(names) == len(set(names))
    assert sum(n.startswith("head") for n in names) == 4


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def test_feature_shape(model):
    z = model.extract_features(window(model.cfg))
    lz = conv_out_length(conv_out_length(32, 5, 2), 3, 1)
    assert z.shape == (lz, 8) == (model.cfg.latent_length, model.cfg.latent_dim)
    assert model.extract_features(window(model.cfg, batch=4)).shape == (4, lz, 8)


def test_zero_input_zero_bias_gives_zero_latents(model):
    for k in model.params:
        if k.startswith("conv") and k.endswith("bias"):
            model.params[k].values[:] = 0
    assert not model.extract_features(np.zeros((3, 32))).values.any()


def test_features_deterministic(model):
    x = window(model.cfg)
    assert model.extract_features(x).values.tobytes() == model.extract_features(x.copy()).values.tobytes()


def test_wrong_window_shape(model):
    with pytest.raises(DimensionError):
        model.extract_features(np.zeros((3, 31)))
    with pytest.raises(DimensionError):
        model.classify(np.zeros((4, 32)))


def test_causality_by_perturbation(model):
    z = np.random.default_rng(1).normal(size=(model.cfg.latent_length, 8))
    for upto in (1, 3, 5):
        base = model.encode_context(Tensor(z), upto).values
        z2 = z.copy()
        z2[upto:] += 100.0
        assert np.array_equal(model.encode_context(Tensor(z2), upto).values, base)
        z3 = z.copy()
        z3[upto - 1] += 1.0
        assert not np.array_equal(model.encode_context(Tensor(z3), upto).values, base)


def test_context_index_range(model):
    z = Tensor(np.zeros((model.cfg.latent_length, 8)))
    with pytest.raises(IndexError):
        model.encode_context(z, 0)
    with pytest.raises(IndexError):
        model.encode_context(z, model.cfg.latent_length + 1)


def _attention_oracle(q, k, v):
    n, dh = q.shape
    out = np.zeros_like(v)
    for i in range(n):
        s = np.array([q[i] @ k[j] / np.sqrt(dh) for j in range(i + 1)])
        w = np.exp(s - s.max())
        w /= w.sum()
        out[i] = sum(w[j] * v[j] for j in range(i + 1))
    return out


def test_attention_matches_hand_oracle():
    rng = np.random.default_rng(2)
    q, k, v = (rng.normal(size=(6, 4)) for _ in range(3))
    got = causal_attention(Tensor(q), Tensor(k), Tensor(v)).values
    np.testing.assert_allclose(got, _attention_oracle(q, k, v), atol=1e-10)


def test_single_layer_identity_encoder_is_attention_average():
    cfg = small(encoder_heads=1)
    m = Backbone(cfg, seed=0)
    d = cfg.latent_dim
    for name in ("wq", "wk", "wv", "wo"):
        m.params[f"enc.layer0.attn.{name}"].values[:] = np.eye(d)
    for name in ("ff1.weight", "ff1.bias", "ff2.weight", "ff2.bias"):
        m.params[f"enc.layer0.{name}"].values[:] = 0
    m.params["enc.pos"].values[:] = 0
    z = np.random.default_rng(5).normal(size=(cfg.latent_length, d))

    def ln(x):
        return (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)

    upto = 5
    a = ln(z[:upto])
    h = z[:upto] + _attention_oracle(a, a, a)
    want = ln(h)[-1]
    np.testing.assert_allclose(m.encode_context(Tensor(z), upto).values, want, atol=1e-10)


def test_prediction_heads(model):
    c = Tensor(np.random.default_rng(0).normal(size=8))
    model.params["head1.weight"].values[:] = np.eye(8)
    np.testing.assert_allclose(model.predict_future(c, 1).values, c.values)
    model.params["head2.weight"].values[:] = 0
    assert not model.predict_future(c, 2).values.any()
    fresh = Backbone(small(), seed=9)
    assert not np.allclose(fresh.predict_future(c, 1).values, fresh.predict_future(c, 2).values)
    with pytest.raises(IndexError):
        model.predict_future(c, 0)
    with pytest.raises(IndexError):
        model.predict_future(c, 4)


def test_classifier_shape_and_zero_head(model):
    x = window(model.cfg)
    assert model.classify(x).shape == (4,)
    model.params["cls.weight"].values[:] = 0
    model.params["cls.bias"].values[:] = 0
    p = softmax(model.classify(x)).values
    np.testing.assert_allclose(p, 0.25)


def test_classifier_row_permutation_equivariance(model):
    x = window(model.cfg, batch=3)
    before = model.classify(x).values
    perm = np.array([2, 0, 3, 1])
    model.params["cls.weight"].values[:] = model.params["cls.weight"].values[perm]
    model.params["cls.bias"].values[:] = model.params["cls.bias"].values[perm]
    np.testing.assert_array_equal(model.classify(x).values, before[:, perm])


def test_every_parameter_receives_gradient_after_contrastive_step(model):
    x = window(model.cfg, batch=6)
    xv = build_views(x, "inversion")[1]
    loss = cross_view_loss(model, x, xv, model.cfg.context_window) + model.classify(x).sum()
    loss.backward()
    dead = [k for k, p in model.params.items() if p.grad is None or not np.any(p.grad)]
    assert dead == []


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------


def test_save_load_save_byte_identical(tmp_path, model):
    model.provenance = {"stage": "pretrain", "epoch": "3", "seed": "7"}
    model.buffers["norm.mean"][:] = [1.0, 2.0, 3.0]
    a = tmp_path / "a.ckpt"
    b = tmp_path / "b.ckpt"
    save_checkpoint(model, a)
    save_checkpoint(load_checkpoint(a), b)
    assert a.read_bytes() == b.read_bytes()
    assert load_checkpoint(a).provenance == model.provenance


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_forward_outputs_survive_round_trip(seed):
    m = Backbone(small(), seed=seed)
    back = decode_checkpoint(encode_checkpoint(m))
    x = window(m.cfg, seed=seed, batch=2)
    with no_grad():
        assert back.classify(x).values.tobytes() == m.classify(x).values.tobytes()
        assert back.extract_features(x).values.tobytes() == m.extract_features(x).values.tobytes()


def test_float32_payload_option():
    m = Backbone(small(), seed=1)
    back = decode_checkpoint(encode_checkpoint(m, dtype="f4"))
    np.testing.assert_allclose(back.params["cls.weight"].values, m.params["cls.weight"].values, rtol=1e-6)


def test_checkpoint_header():
    buf = encode_checkpoint(Backbone(small()))
    assert buf[:4] == b"EMUP"
    assert struct.unpack_from("<H", buf, 4) == (1,)
    (n,) = struct.unpack_from("<I", buf, 6)
    assert b"context_window=5" in buf[10 : 10 + n]


def test_version_mismatch_refused():
    buf = bytearray(encode_checkpoint(Backbone(small())))
    buf[4:6] = struct.pack("<H", 2)
    with pytest.raises(CheckpointError, match="format_version"):
        decode_checkpoint(bytes(buf))


def test_tampered_shape_names_parameter():
    buf = bytearray(encode_checkpoint(Backbone(small())))
    name = b"conv1.bias"
    at = buf.index(name) + len(name) + 3
    assert struct.unpack_from("<I", buf, at) == (8,)
    buf[at : at + 4] = struct.pack("<I", 7)
    with pytest.raises(CheckpointError, match="conv1.bias"):
        decode_checkpoint(bytes(buf))


def test_renamed_parameter_named_in_error():
    buf = encode_checkpoint(Backbone(small())).replace(b"cls.bias", b"cls.bixs")
    with pytest.raises(CheckpointError, match="cls.bi"):
        decode_checkpoint(buf)


def test_truncated_checkpoint():
    buf = encode_checkpoint(Backbone(small()))
    for cut in (3, 20, len(buf) // 2, len(buf) - 1):
        with pytest.raises(CheckpointError):
            decode_checkpoint(buf[:cut])
