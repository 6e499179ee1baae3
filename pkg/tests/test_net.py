import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mstkd import autodiff as ad
from mstkd.autodiff import Tensor
from mstkd.net import (
    NetConfig,
    Network,
    encoder_forward,
    init_params,
    msa_block,
    patch_embed,
    sequence_length,
)

TINY = NetConfig(base_channels=1, dims=(8, 8, 8), embed_dim=4, heads=2)


@pytest.fixture(scope="module")
def default_trace():
    net = Network(NetConfig(), seed=0)
    x = np.random.default_rng(0).random((4, 16, 16, 16))
    return net, x, net(x)


def test_sequence_length_examples():
    assert sequence_length((16, 16, 16), 1) == 8
    assert sequence_length((16, 16, 16), 2) == 1
    with pytest.raises(ValueError):
        sequence_length((16, 16, 16), 3)


@pytest.mark.parametrize(
    "cfg",
    [
        NetConfig(),
        NetConfig(dims=(16, 16, 16), patch=2),
        NetConfig(dims=(8, 16, 24)),
        NetConfig(dims=(32, 16, 16), patch=2),
        NetConfig(dims=(48, 48, 16), patch=2, embed_dim=12, heads=3),
    ],
)
def test_n_formula_across_configs(cfg):
    h, w, d = cfg.dims
    expected = (h // 8) * (w // 8) * (d // 8) // cfg.patch**3
    assert cfg.seq_len == expected
    feat = Tensor(np.zeros((1, 5) + tuple(n // 8 for n in cfg.dims)))
    tokens = patch_embed(feat, Tensor(np.zeros((5 * cfg.patch**3, 3))), Tensor(np.zeros(3)), cfg.patch)
    assert tokens.shape == (expected, 3)


def test_config_validation():
    with pytest.raises(ValueError):
        NetConfig(dims=(12, 16, 16))
    with pytest.raises(ValueError):
        NetConfig(embed_dim=30, heads=4)
    with pytest.raises(ValueError):
        NetConfig(dims=(8, 8, 8), patch=2)


def test_patch_embed_row_major_order():
    feat = np.arange(2 * 4 * 2 * 2, dtype=float).reshape(1, 2, 4, 2, 2)
    w = np.eye(2 * 8)
    tok = patch_embed(Tensor(feat), Tensor(w), Tensor(np.zeros(16)), 2).data
    assert tok.shape == (2, 16)
    np.testing.assert_array_equal(tok[0], feat[0, :, 0:2, 0:2, 0:2].ravel())
    np.testing.assert_array_equal(tok[1], feat[0, :, 2:4, 0:2, 0:2].ravel())
    with pytest.raises(ValueError):
        patch_embed(Tensor(np.zeros((1, 2, 3, 2, 2))), Tensor(np.zeros((16, 2))), Tensor(np.zeros(2)), 2)


def _block_params(rng, k, zero=False):
    p = {}
    for m in ("q", "k", "v", "o"):
        p[f"b.{m}.w"] = Tensor(np.zeros((k, k)) if zero else rng.normal(size=(k, k)))
        p[f"b.{m}.b"] = Tensor(np.zeros(k))
    for ln in ("ln1", "ln2"):
        p[f"b.{ln}.g"] = Tensor(np.ones(k))
        p[f"b.{ln}.b"] = Tensor(np.zeros(k))
    p["b.mlp1.w"] = Tensor(rng.normal(size=(k, 2 * k)))
    p["b.mlp1.b"] = Tensor(np.zeros(2 * k))
    p["b.mlp2.w"] = Tensor(rng.normal(size=(2 * k, k)))
    p["b.mlp2.b"] = Tensor(np.zeros(k))
    return p


def test_msa_single_token_and_uniform_cases():
    rng = np.random.default_rng(1)
    _, a = msa_block(Tensor(rng.normal(size=(1, 8))), _block_params(rng, 8), "b.", 4)
    np.testing.assert_array_equal(a.data, np.ones((4, 1, 1)))
    _, a = msa_block(Tensor(np.zeros((5, 8))), _block_params(rng, 8, zero=True), "b.", 2)
    np.testing.assert_allclose(a.data, np.full((2, 5, 5), 0.2), rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        msa_block(Tensor(np.zeros((5, 6))), _block_params(rng, 6), "b.", 4)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n_tok=st.integers(1, 9), scale=st.floats(0.01, 30.0))
def test_attention_rows_sum_to_one(seed, n_tok, scale):
    rng = np.random.default_rng(seed)
    _, a = msa_block(Tensor(rng.normal(size=(n_tok, 8)) * scale), _block_params(rng, 8), "b.", 4)
    assert np.all(np.abs(a.data.sum(axis=2) - 1.0) <= 1e-6)


def test_forward_shapes(default_trace):
    net, _, tr = default_trace
    assert tr.logits.shape == (3, 16, 16, 16)
    assert len(tr.attn) == len(tr.tokens) == 3
    assert all(a.shape == (4, 8, 8) for a in tr.attn)
    assert all(z.shape == (8, 32) for z in tr.tokens)
    assert tr.f_enc.shape == (64,)
    assert tr.f_enc_grid.shape == (64, 8) and tr.f_t.shape == (32, 8) and tr.f_dec.shape == (64, 8)
    assert tr.fused.shape == (96, 8)
    for a in tr.attn:
        assert np.all(np.abs(a.data.sum(axis=2) - 1.0) <= 1e-6)


def test_encoder_shapes_and_channel_check():
    cfg = NetConfig()
    p = {k: Tensor(v) for k, v in init_params(cfg, 0).items()}
    skips, bottleneck, f_enc = encoder_forward(Tensor(np.zeros((1, 4, 16, 16, 16))), p)
    assert bottleneck.shape == (1, 128, 2, 2, 2)
    assert [s.shape[1] for s in skips] == [4, 16, 64]
    with pytest.raises(ad.ShapeError):
        encoder_forward(Tensor(np.zeros((1, 3, 16, 16, 16))), p)
    with pytest.raises(ad.ShapeError):
        Network(cfg)(np.zeros((3, 16, 16, 16)))


def test_forward_deterministic(default_trace):
    net, x, tr = default_trace
    again = net(x)
    np.testing.assert_array_equal(again.logits.data, tr.logits.data)
    for a, b in zip(again.attn, tr.attn):
        np.testing.assert_array_equal(a.data, b.data)


def test_teacher_student_traces_shape_identical(default_trace):
    _, x, tr = default_trace
    other = Network(NetConfig(), seed=9)(x)
    for name in ("logits", "f_enc", "f_enc_grid", "f_t", "f_dec", "fused"):
        assert getattr(other, name).shape == getattr(tr, name).shape
    assert [a.shape for a in other.attn] == [a.shape for a in tr.attn]


def test_frozen_network_records_no_tape():
    net = Network(TINY, seed=0).frozen()
    tr = net(np.random.default_rng(0).random((4, 8, 8, 8)))
    assert not tr.logits.requires_grad


def test_end_to_end_gradient_wrt_encoder_weight():
    net = Network(TINY, seed=3)
    x = np.random.default_rng(3).random((4, 8, 8, 8))
    w = net.params["enc1.w"]
    net(x).logits.sum().backward()
    analytic = w.grad.copy()
    rng = np.random.default_rng(4)
    idx = [tuple(rng.integers(0, n) for n in w.shape) for _ in range(5)]
    h = 1e-5
    frozen = net.state_dict()
    for i in idx:
        vals = []
        for sign in (1, -1):
            p = {k: v.copy() for k, v in frozen.items()}
            p["enc1.w"][i] += sign * h
            vals.append(Network(TINY, p, trainable=False)(x).logits.data.sum())
        numeric = (vals[0] - vals[1]) / (2 * h)
        assert abs(numeric - analytic[i]) <= 1e-3 * max(abs(numeric), abs(analytic[i]), 1e-6)


def test_full_gradient_check_tiny_network():
    # one parameter tensor per stage, a random subset of coordinates each
    cfg = NetConfig(base_channels=1, dims=(8, 8, 8), embed_dim=2, heads=1, blocks=2)
    x = np.random.default_rng(5).random((4, 8, 8, 8))
    params = init_params(cfg, 5)
    r = Tensor(np.random.default_rng(6).normal(size=(3, 8, 8, 8)))
    net = Network(cfg, params)
    (net(x).logits * r).sum().backward()
    rng = np.random.default_rng(7)
    for name in ("enc0.w", "embed.w", "pos", "blk0.q.w", "blk1.mlp1.w", "proj0.w", "dec0.w", "head.w"):
        grad = net.params[name].grad
        for _ in range(3):
            i = tuple(rng.integers(0, n) for n in grad.shape)
            vals = []
            for sign in (1, -1):
                p = {k: v.copy() for k, v in params.items()}
                p[name][i] += sign * 1e-5
                vals.append((Network(cfg, p, trainable=False)(x).logits * r).sum().item())
            numeric = (vals[0] - vals[1]) / 2e-5
            assert abs(numeric - grad[i]) <= 1e-4 * max(abs(numeric), abs(grad[i]), 1e-7), name


def test_checkpoint_round_trip(tmp_path):
    net = Network(TINY, seed=2)
    net.save(tmp_path / "n.ckpt")
    back = Network.load(tmp_path / "n.ckpt", TINY)
    for k, v in net.state_dict().items():
        np.testing.assert_array_equal(back.params[k].data, v)
    lines = (tmp_path / "n.ckpt.manifest").read_text().splitlines()
    assert lines[0].split("\t")[0] == "enc0.w"
    with pytest.raises(ValueError):
        Network.load(tmp_path / "n.ckpt", NetConfig())
