import math

import numpy as np
import pytest
import torch

from braincl import (
    ModelConfig,
    MoEConvBlock,
    MoEUNet3D,
    ValidationError,
    build_domain_token,
    gate_weights,
    load_checkpoint,
    parameter_checksum,
    save_checkpoint,
)
from conftest import finite_difference_grad, max_rel_err

TOKEN_LEN = 10


def small_config(**overrides):
    base = dict(in_channels=6, token_len=TOKEN_LEN, widths=(4, 8), experts=2)
    base.update(overrides)
    return ModelConfig(**base)


def random_bits(rng, n=1):
    bits = np.zeros((n, TOKEN_LEN), dtype=np.float32)
    for row in bits:
        row[rng.integers(0, 6)] = 1
        row[6 + rng.integers(0, 4)] = 1
    return bits


# -- gating ---------------------------------------------------------------------


def test_gate_single_expert_is_one():
    bits = np.array([1.0, 0.0, 1.0])
    g = gate_weights(bits, np.random.default_rng(0).normal(size=(1, 3)), np.zeros(1))
    assert g.shape == (1,)
    assert g[0] == pytest.approx(1.0)


def test_gate_zero_params_uniform():
    g = gate_weights(np.ones(TOKEN_LEN), np.zeros((4, TOKEN_LEN)), np.zeros(4))
    assert np.allclose(g, 0.25)


def test_gate_log_bias_hand_case():
    bias = np.log([1.0, 2.0, 3.0, 4.0])
    g = gate_weights(np.ones(TOKEN_LEN), np.zeros((4, TOKEN_LEN)), bias)
    assert np.allclose(g, [0.1, 0.2, 0.3, 0.4], atol=1e-9)


def test_gate_dimension_mismatch():
    with pytest.raises(ValidationError):
        gate_weights(np.ones(5), np.zeros((4, TOKEN_LEN)), np.zeros(4))
    with pytest.raises(ValidationError):
        gate_weights(np.ones(TOKEN_LEN), np.zeros((4, TOKEN_LEN)), np.zeros(3))


def test_gate_simplex_property():
    rng = np.random.default_rng(0)
    for _ in range(500):
        e = int(rng.integers(1, 6))
        w = rng.normal(scale=3.0, size=(e, TOKEN_LEN))
        b = rng.normal(scale=3.0, size=e)
        g = gate_weights(random_bits(rng)[0], w, b)
        assert (g > 0).all()
        assert abs(g.sum() - 1.0) < 1e-6


def test_gate_token_sensitivity():
    # with a nondegenerate gate some pair of tokens must be routed differently
    rng = np.random.default_rng(1)
    w = rng.normal(size=(4, TOKEN_LEN))
    b = np.zeros(4)
    tokens = random_bits(rng, n=16)
    gs = gate_weights(tokens, w, b)
    diffs = np.linalg.norm(gs[None] - gs[:, None], axis=-1)
    assert diffs.max() > 1e-3


# -- MoE block ------------------------------------------------------------------


def test_identical_experts_reduce_to_plain_conv():
    torch.manual_seed(0)
    block = MoEConvBlock(3, 5, TOKEN_LEN, experts=4)
    with torch.no_grad():
        for expert in block.experts[1:]:
            expert.weight.copy_(block.experts[0].weight)
            expert.bias.copy_(block.experts[0].bias)
    f = torch.randn(2, 3, 6, 6, 6)
    for seed in range(3):
        bits = torch.as_tensor(random_bits(np.random.default_rng(seed), n=2))
        y = block.aggregate(f, bits)
        ref = torch.nn.functional.conv3d(
            f, block.experts[0].weight, block.experts[0].bias, padding=1
        )
        assert torch.allclose(y, ref, atol=1e-5)


def test_one_hot_gate_selects_expert():
    torch.manual_seed(1)
    block = MoEConvBlock(2, 3, TOKEN_LEN, experts=4)
    with torch.no_grad():
        block.gate.weight.zero_()
        block.gate.bias.zero_()
        block.gate.bias[2] = 60.0
    f = torch.randn(1, 2, 4, 4, 4)
    bits = torch.as_tensor(random_bits(np.random.default_rng(0)))
    y = block.aggregate(f, bits)
    ref = block.experts[2](f)
    assert torch.allclose(y, ref, atol=1e-5)


def test_block_matches_dense_numpy_oracle():
    # 1x1x1 kernels over a 4^3 single-channel map: independent dense evaluation
    torch.manual_seed(2)
    block = MoEConvBlock(1, 1, TOKEN_LEN, experts=2, kernel_size=1).double()
    rng = np.random.default_rng(3)
    f = rng.normal(size=(1, 1, 4, 4, 4))
    bits = random_bits(rng)

    w_gate = block.gate.weight.detach().numpy()
    b_gate = block.gate.bias.detach().numpy()
    logits = w_gate @ bits[0] + b_gate
    exp = np.exp(logits - logits.max())
    g = exp / exp.sum()
    expected = np.zeros_like(f)
    for i, expert in enumerate(block.experts):
        w = float(expert.weight.detach().numpy().reshape(()))
        b = float(expert.bias.detach().numpy().reshape(()))
        expected += g[i] * (w * f + b)

    y = block.aggregate(torch.as_tensor(f), torch.as_tensor(bits, dtype=torch.float64))
    assert np.allclose(y.detach().numpy(), expected, atol=1e-9)


def test_block_convexity():
    torch.manual_seed(3)
    block = MoEConvBlock(2, 3, TOKEN_LEN, experts=4)
    f = torch.randn(2, 2, 5, 5, 5)
    bits = torch.as_tensor(random_bits(np.random.default_rng(4), n=2))
    with torch.no_grad():
        outs = torch.stack([expert(f) for expert in block.experts], dim=0)
        y = block.aggregate(f, bits)
    lo = outs.min(dim=0).values
    hi = outs.max(dim=0).values
    assert (y >= lo - 1e-5).all()
    assert (y <= hi + 1e-5).all()


def test_block_shape_mismatch():
    block = MoEConvBlock(2, 3, TOKEN_LEN, experts=2)
    with pytest.raises(ValidationError):
        block.aggregate(torch.randn(1, 5, 4, 4, 4), torch.ones(1, TOKEN_LEN))


def test_block_gradcheck():
    torch.manual_seed(4)
    block = MoEConvBlock(2, 2, TOKEN_LEN, experts=2).double()
    f = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64)
    bits = torch.as_tensor(random_bits(np.random.default_rng(5)), dtype=torch.float64)
    probe = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64)

    def loss_fn():
        return (block(f, bits) * probe).sum()

    for param in (block.gate.weight, block.gate.bias, block.experts[0].weight):
        loss = loss_fn()
        block.zero_grad()
        loss.backward()
        analytic = param.grad.clone()

        original = param.data.clone()

        def perturbed(values, p=param):
            with torch.no_grad():
                p.data.copy_(values)
            out = loss_fn()
            with torch.no_grad():
                p.data.copy_(original)
            return out

        fd = finite_difference_grad(perturbed, original)
        assert max_rel_err(analytic, fd) <= 1e-3


# -- full network -----------------------------------------------------------------


def test_forward_shape_contract(universe):
    torch.manual_seed(5)
    model = MoEUNet3D(ModelConfig(in_channels=6, token_len=10, widths=(4, 8, 8), experts=2))
    x = torch.randn(1, 6, 16, 16, 16)
    bits = torch.as_tensor(random_bits(np.random.default_rng(0)))
    logits, bottleneck = model(x, bits)
    assert logits.shape == (1, 2, 16, 16, 16)
    assert bottleneck.shape == (1, 8 * 4 * 4 * 4)


def test_forward_rejects_indivisible_dims():
    model = MoEUNet3D(small_config(widths=(4, 8, 8)))
    with pytest.raises(ValidationError, match="multiples of 4"):
        model(torch.randn(1, 6, 16, 16, 10), torch.ones(1, TOKEN_LEN))


def test_forward_rejects_wrong_channels():
    model = MoEUNet3D(small_config())
    with pytest.raises(ValidationError):
        model(torch.randn(1, 3, 8, 8, 8), torch.ones(1, TOKEN_LEN))


def test_eval_mode_deterministic(universe):
    torch.manual_seed(6)
    model = MoEUNet3D(small_config())
    model.eval()
    token = build_domain_token({"FLAIR", "T1"}, "Tumor", universe)
    packed = np.random.default_rng(1).normal(size=(6, 8, 8, 8)).astype(np.float32)
    out1 = model.forward_sample(packed, token)
    out2 = model.forward_sample(packed, token)
    assert np.array_equal(out1.logits, out2.logits)
    assert np.array_equal(out1.bottleneck, out2.bottleneck)


def test_channel_identity_is_semantic(universe):
    # the same data moved to a different modality channel (with matching token)
    # must generally produce different logits: channels are not interchangeable
    torch.manual_seed(7)
    model = MoEUNet3D(small_config(experts=1))
    model.eval()
    rng = np.random.default_rng(2)
    data = rng.normal(size=(8, 8, 8)).astype(np.float32)

    def run(channel, modality):
        packed = np.zeros((6, 8, 8, 8), dtype=np.float32)
        packed[channel] = data
        token = build_domain_token({modality}, "Tumor", universe)
        return model.forward_sample(packed, token).logits

    flair = run(1, "FLAIR")
    t1 = run(2, "T1")
    assert not np.allclose(flair, t1, atol=1e-4)


def test_bottleneck_tag_default():
    cfg = small_config(widths=(4, 8, 16))
    assert cfg.bottleneck_tag == "enc2.block1"


# -- persistence -------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(8)
    model = MoEUNet3D(small_config())
    model.eval()
    path = tmp_path / "ckpt.zip"
    save_checkpoint(model, path)
    clone = load_checkpoint(path)
    clone.eval()

    assert parameter_checksum(clone) == parameter_checksum(model)
    x = torch.randn(1, 6, 8, 8, 8)
    bits = torch.ones(1, TOKEN_LEN)
    with torch.no_grad():
        a, _ = model(x, bits)
        b, _ = clone(x, bits)
    assert torch.equal(a, b)


def test_checkpoint_uses_documented_names(tmp_path):
    import zipfile

    model = MoEUNet3D(small_config())
    path = tmp_path / "ckpt.zip"
    save_checkpoint(model, path)
    with zipfile.ZipFile(path) as zf:
        names = set(zf.namelist())
    assert "config.json" in names
    assert "params/enc0.block0.expert1.kernel.npy" in names
    assert "params/enc0.block0.gate.W.npy" in names
    assert "params/dec0.block1.norm.gamma.npy" in names
    assert "params/head.kernel.npy" in names


def test_checksum_detects_drift():
    torch.manual_seed(9)
    model = MoEUNet3D(small_config())
    before = parameter_checksum(model)
    with torch.no_grad():
        model.head.bias.add_(1e-3)
    assert parameter_checksum(model) != before


def test_load_rejects_name_mismatch(tmp_path):
    model = MoEUNet3D(small_config())
    params = {name: t.detach().numpy() for name, t in model.param_dict().items()}
    params.pop("head.bias")
    with pytest.raises(ValidationError):
        model.load_param_dict(params)
