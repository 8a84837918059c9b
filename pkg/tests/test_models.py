import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from beatforge.model_fusion import FusionConfig, SpecTNTTCN
from beatforge.model_spectnt import (HeadOutOfRange, SpecTNT, SpecTNTBlock,
                                     SpecTNTConfig, WrongDuration,
                                     export_attention)
from beatforge.model_tcn import (TCN, TCNConfig, TCNFrontend, TCNLayer,
                                 TCNStack, receptive_field)
from beatforge.nn_core import ShapeMismatch, finite_difference_check, \
    param_count

import oracles

D = torch.float64


def toy_spectnt(**kw):
    base = dict(n_bands=16, n_blocks=1, spectral_dim=8, spectral_heads=2,
                temporal_dim=16, temporal_heads=2, frontend_channels=4,
                frontend_units=2, ffn_multiplier=1.0, dropout=0.0,
                input_seconds=None)
    base.update(kw)
    return SpecTNTConfig(**base)


def toy_tcn(**kw):
    base = dict(frontend_filters=3, channels=3, n_layers=2, kernel_t=3,
                dropout=0.0, input_seconds=None)
    base.update(kw)
    return TCNConfig(**base)


def toy_fusion(**kw):
    base = dict(front_blocks=1, tail_blocks=1, chunk_seconds=0.2, n_chunks=4,
                input_seconds=0.8, spectnt=toy_spectnt(),
                tcn=toy_tcn(channels=4))
    base.update(kw)
    return FusionConfig(**base)


def seeded(cls, cfg, seed=0):
    torch.manual_seed(seed)
    return cls(cfg).double().eval()


def randn(*shape, seed=0, grad=False):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=D).requires_grad_(grad)


# parameter budgets

@pytest.mark.parametrize("cls,target", [(TCN, 86_679), (SpecTNT, 4_637_392),
                                        (SpecTNTTCN, 4_692_896)])
def test_param_count_within_budget(cls, target):
    t0 = time.perf_counter()
    n = param_count(cls())
    assert time.perf_counter() - t0 < 5
    assert abs(n - target) / target <= 0.10


# TCN

def test_tcn_frequency_chain():
    assert TCNConfig().frequency_chain() == [128, 126, 42, 23, 7, 5, 1]


def test_tcn_frontend_rejects_bad_band_count():
    with pytest.raises(ShapeMismatch):
        TCNFrontend(TCNConfig(n_bands=40))


def test_tcn_full_size_shape():
    model = TCN().eval()
    with torch.no_grad():
        out = model(torch.randn(1, 1200, 128))
    assert out.shape == (1, 1200, 3)
    with pytest.raises(WrongDuration):
        model(torch.zeros(1, 1000, 128))
    # one frame of slack is allowed
    with torch.no_grad():
        assert model(torch.zeros(1, 1201, 128)).shape == (1, 1201, 3)


def test_tcn_frontend_zero_input_zero_output_without_bias():
    front = TCNFrontend(toy_tcn()).double().eval()
    for conv in front.convs:
        nn.init.zeros_(conv.bias)
    out = front(torch.zeros(2, 20, 128, dtype=D))
    assert out.shape == (2, 3, 20)
    assert torch.count_nonzero(out) == 0


def test_tcn_layer_delta_kernels_identity():
    layer = TCNLayer(4, 5, index=1).double().eval()
    with torch.no_grad():
        for conv in layer.branches:
            conv.weight.zero_()
            conv.bias.zero_()
            conv.weight[:, :, 2] = torch.eye(4)
        layer.merge.weight.zero_()
        layer.merge.bias.zero_()
        layer.merge.weight[:, :4, 0] = 0.5 * torch.eye(4)
        layer.merge.weight[:, 4:, 0] = 0.5 * torch.eye(4)
        layer.residual.weight.zero_()
        layer.residual.bias.zero_()
    # ELU is the identity on positive input
    x = randn(1, 4, 30).abs()
    assert torch.allclose(layer(x), x, atol=1e-15)


@pytest.mark.parametrize("n_layers", [1, 2, 3])
def test_receptive_field_matches_gradient_support(n_layers):
    cfg = toy_tcn(n_layers=n_layers, kernel_t=5)
    stack = TCNStack(cfg).double().eval()
    centre, n = 100, 201
    support = oracles.gradient_support(
        lambda x: stack(x.transpose(1, 2)).transpose(1, 2), n, cfg.channels,
        centre)
    rf = receptive_field(cfg)
    # dilation leaves holes, so compare the extent
    assert support[-1] - support[0] + 1 == rf
    assert support[0] == centre - rf // 2 and support[-1] == centre + rf // 2


def test_full_receptive_field_covers_input():
    cfg = TCNConfig()
    assert receptive_field(cfg) > cfg.input_frames


def test_tcn_shift_equivariance_interior():
    model = seeded(TCN, toy_tcn())
    x = randn(1, 120, 128)
    k = 7
    shifted = torch.roll(x, k, dims=1)
    with torch.no_grad():
        a, b = model(x), model(shifted)
    np.testing.assert_allclose(b[0, 50:70].numpy(), a[0, 50 - k:70 - k].numpy(),
                               atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10 ** 6), scale=st.floats(1e-3, 1e3))
def test_tcn_output_finite(seed, scale):
    model = seeded(TCN, toy_tcn())
    x = randn(1, 16, 128, seed=seed) * scale
    with torch.no_grad():
        assert torch.isfinite(model(x)).all()


def test_tcn_grad():
    model = seeded(TCN, toy_tcn())
    x = randn(1, 12, 128, grad=True)
    err = finite_difference_check(lambda *a: model(a[0]).pow(2).sum(),
                                  [x, *model.parameters()], n_probes=30)
    assert err < 1e-4


def test_tcn_overfits_one_clip():
    from beatforge.audio_io import synth_clicks
    from beatforge.frontend import FrontendConfig, build_targets, \
        harmonic_representation
    from beatforge.nn_core import Adam
    from beatforge.training import weighted_bce
    clip, ann = synth_clicks(120.0, 4, 6.0, rng=np.random.default_rng(0),
                             noise_level=0.01)
    rep = harmonic_representation(clip, FrontendConfig())
    tgt = build_targets(ann, rep.n_frames, rep.frame_rate)
    torch.manual_seed(0)
    model = TCN(toy_tcn(frontend_filters=8, channels=8, n_layers=4))
    opt = Adam(model, lr=0.01)
    x = torch.from_numpy(rep.values[None].astype(np.float32))
    y, w = tgt.labels[None], tgt.weights[None]
    for step in range(500):
        loss = weighted_bce(model(x), y, w)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if loss.item() < 0.05:
            break
    assert loss.item() < 0.05


# SpecTNT

def test_spectnt_full_size_shape():
    model = SpecTNT().eval()
    with torch.no_grad():
        out = model(torch.randn(1, 300, 128))
        assert out.shape == (1, 300, 3)
        hidden = model.frontend(torch.randn(1, 300, 128))
    assert hidden.shape == (1, 256, 16, 300)
    with pytest.raises(WrongDuration):
        model(torch.zeros(1, 200, 128))


def test_spectnt_block_single_frame():
    cfg = toy_spectnt()
    block = SpecTNTBlock(cfg).double().eval()
    x = randn(1, 1, 4, cfg.spectral_dim)
    fct = randn(1, 1, cfg.temporal_dim, seed=1)
    pos = randn(5, cfg.spectral_dim, seed=2)
    block.set_keep_attention(True)
    tokens, out = block(x, fct, pos)
    assert tokens.shape == (1, 1, 4, cfg.spectral_dim)
    assert out.shape == (1, 1, cfg.temporal_dim)
    assert torch.allclose(block.temporal.attn.last_attention,
                          torch.ones(1, 2, 1, 1, dtype=D))


def test_spectnt_blocks_shape_stable_and_rows_stochastic():
    cfg = toy_spectnt(n_blocks=5)
    model = seeded(SpecTNT, cfg)
    tokens, fct = model.embed(randn(2, 9, 16))
    assert fct.shape == (2, 9, cfg.temporal_dim)
    for block in model.blocks:
        block.set_keep_attention(True)
        new_tokens, new_fct = block(tokens, fct, model.freq_pos)
        assert new_tokens.shape == tokens.shape
        assert new_fct.shape == fct.shape
        spec = block.spectral.attn.last_attention
        assert spec.shape[-1] == cfg.reduced_bands + 1
        assert torch.allclose(spec.sum(-1), torch.ones((), dtype=D))
        tokens, fct = new_tokens, new_fct


def test_spectnt_rejects_mismatched_fct():
    cfg = toy_spectnt()
    block = SpecTNTBlock(cfg).double()
    with pytest.raises(ShapeMismatch):
        block(randn(1, 3, 4, 8), randn(1, 2, 16), randn(5, 8))


def test_spectnt_grad():
    model = seeded(SpecTNT, toy_spectnt())
    x = randn(1, 6, 16, grad=True)
    err = finite_difference_check(lambda *a: model(a[0])[0, 2, 1],
                                  [x, *model.parameters()], n_probes=40)
    assert err < 1e-4


def test_softmax_output_variant():
    model = seeded(SpecTNT, toy_spectnt(output="softmax"))
    p = model.probabilities(randn(1, 5, 16))
    assert torch.allclose(p.sum(-1), torch.ones((), dtype=D))


@pytest.mark.parametrize("n_frames", [1, 7, 20])
def test_export_attention_shapes_and_rows(n_frames):
    cfg = toy_spectnt(n_blocks=2)
    model = seeded(SpecTNT, cfg)
    x = randn(1, n_frames, 16)
    spec = export_attention(model, x, "spectral", 1)
    temp = export_attention(model, x, "temporal", 0)
    assert spec.shape == (n_frames, cfg.reduced_bands + 1)
    assert temp.shape == (n_frames, n_frames)
    np.testing.assert_allclose(spec.sum(1), 1.0, atol=1e-5)
    np.testing.assert_allclose(temp.sum(1), 1.0, atol=1e-5)
    assert not model.blocks[-1].temporal.attn.keep_attention


def test_export_attention_head_range():
    model = seeded(SpecTNT, toy_spectnt())
    with pytest.raises(HeadOutOfRange):
        export_attention(model, randn(1, 4, 16), "temporal", 2)
    with pytest.raises(HeadOutOfRange):
        export_attention(model, randn(1, 4, 16), "spectral", -1)
    with pytest.raises(ValueError):
        export_attention(model, randn(1, 4, 16), "both", 0)


def test_loud_frame_draws_temporal_attention():
    wins = 0
    for seed in range(10):
        model = seeded(SpecTNT, toy_spectnt(), seed=seed)
        x = randn(1, 16, 16, seed=100 + seed) * 0.1
        x[0, 5] += 20.0
        attn = export_attention(model, x, "temporal", 0)
        wins += attn[:, 5].sum() > attn.sum(0).mean()
    assert wins >= 7


# fusion

def test_fusion_full_size_shapes():
    model = SpecTNTTCN().eval()
    with torch.no_grad():
        avg, a, b = model(torch.randn(1, 1200, 128))
    assert avg.shape == a.shape == b.shape == (1, 1200, 3)
    assert ((avg >= 0) & (avg <= 1)).all()
    with pytest.raises(WrongDuration):
        model(torch.zeros(1, 300, 128))


def test_fusion_average_is_mean_of_sigmoids():
    model = seeded(SpecTNTTCN, toy_fusion())
    avg, a, b = model(randn(2, 40, 16))
    assert torch.equal(avg, 0.5 * (torch.sigmoid(a) + torch.sigmoid(b)))


def test_fusion_config_checks_chunking():
    with pytest.raises(ValueError):
        FusionConfig(chunk_seconds=5.0)


def test_chunk_mapping_preserves_global_frames():
    model = SpecTNTTCN(toy_fusion())
    x = torch.arange(2 * 40, dtype=D).reshape(2, 40, 1)
    chunks = model.to_chunks(x)
    assert chunks.shape == (8, 10, 1)
    for b in range(2):
        for c in range(4):
            for t in range(10):
                assert chunks[b * 4 + c, t, 0] == x[b, c * 10 + t, 0]
    assert torch.equal(model.from_chunks(chunks, 2), x)


def test_branch_independence():
    model = seeded(SpecTNTTCN, toy_fusion())
    x = randn(1, 40, 16)
    with torch.no_grad():
        _, a0, b0 = model(x)
        for p in list(model.tail.parameters()) + \
                list(model.spectnt.head.parameters()):
            p.add_(1.0)
        _, a1, b1 = model(x)
    assert torch.equal(b0, b1)
    assert not torch.allclose(a0, a1)


def _shared_grads(model, x, which):
    model.zero_grad()
    _, a, b = model(x)
    loss = {"a": a.pow(2).mean(), "b": b.sin().sum(),
            "both": a.pow(2).mean() + b.sin().sum()}[which]
    loss.backward()
    return [p.grad.clone() for p in model.front.parameters()]


def test_fusion_gradient_additivity():
    model = seeded(SpecTNTTCN, toy_fusion())
    x = randn(1, 40, 16)
    ga, gb, gt = (_shared_grads(model, x, w) for w in ("a", "b", "both"))
    for a, b, t in zip(ga, gb, gt):
        assert torch.allclose(t, a + b, rtol=1e-10, atol=1e-14)
    # a frozen branch B contributes nothing
    for p in list(model.tcn.parameters()) + list(model.tcn_in.parameters()):
        p.requires_grad_(False)
    for a, t in zip(ga, _shared_grads(model, x, "a")):
        assert torch.equal(a, t)


def test_fusion_grad():
    model = seeded(SpecTNTTCN, toy_fusion())
    x = randn(1, 40, 16, grad=True)

    def fn(*args):
        avg, a, b = model(args[0])
        return avg[0, 3:30].sum() + a.pow(2).mean()

    err = finite_difference_check(fn, [x, *model.parameters()], n_probes=40)
    assert err < 1e-4
