"""Tests for the ConvNova backbone, its variants, heads and parameter accounting."""

import math

import numpy as np
import pytest

from src.convnova_model import (
    VARIANTS,
    AffineParams,
    BranchState,
    ConvNova,
    ConvParams,
    GcbParams,
    ModelConfig,
    ModelParams,
    NormParams,
    block_dilations,
    check_one_hot,
    class_logits,
    dilation_schedule,
    gcb_forward,
    gcb_forward_additive,
    gcb_forward_single,
    init_params,
    model_forward,
    param_count,
    param_shapes,
    parity_config,
    parity_width,
    unet_block_forward,
    width_for_param_budget,
)
from src.errors import ConfigError, DataFormatError, PreconditionError, ShapeError
from src.genome_data import one_hot
from src.tensor_engine import Rng, Tensor, precision


def tiny_config(**overrides):
    values = dict(hidden_dim=8, n_gcb=3, kernel_size=3, dilation_base=2)
    values.update(overrides)
    return ModelConfig(**values)


def zero_block(d, k=3):
    def conv():
        return ConvParams(Tensor.zeros((k, d, d)), Tensor.zeros((d,)))

    def norm():
        return NormParams(Tensor.ones((d,)), Tensor.zeros((d,)))

    return GcbParams(norm(), conv(), norm(), conv())


def test_dilation_schedule():
    assert dilation_schedule(4, 5) == [1, 1, 4, 16, 64]
    assert dilation_schedule(4, 10, 5) == [1, 1, 4, 16, 64] * 2
    assert dilation_schedule(1, 5) == [1] * 5
    assert dilation_schedule(2, 6, 3) == [1, 1, 2, 1, 1, 2]
    assert dilation_schedule(3, 2) == [1, 1]


def test_unet_blocks_use_unit_dilation():
    config = tiny_config(variant="unet_downsample", dilation_base=4)
    assert block_dilations(config) == [1, 1, 1]


def test_zero_weight_block_is_a_fixed_point_for_a():
    d = 6
    rng = Rng(0)
    a, b = Tensor(rng.normal((10, d))), Tensor(rng.normal((10, d)))
    out = gcb_forward(BranchState(a, b), zero_block(d), dilation=2)
    np.testing.assert_array_equal(out.a.data, a.data)
    assert np.max(np.abs(out.b.data - (b.data + 0.5))) < 1e-7


def test_branch_state_rejects_mismatched_shapes():
    with pytest.raises(ShapeError):
        BranchState(Tensor.zeros((4, 2)), Tensor.zeros((4, 3)))


def test_param_counts():
    assert param_count(ModelConfig()) == 1_517_828
    assert 1_400_000 <= param_count(ModelConfig()) <= 2_000_000
    assert param_count(ModelConfig(hidden_dim=64)) == 382_084
    assert 330_000 <= param_count(ModelConfig(hidden_dim=64)) <= 440_000
    assert param_count(ModelConfig(hidden_dim=1, n_gcb=1, kernel_size=1, stem_kernel_size=1)) == 26


def test_param_count_matches_initialized_tensors():
    for variant in VARIANTS:
        config = tiny_config(variant=variant)
        params = init_params(config, seed=0)
        assert sum(t.size for t in params.named_tensors().values()) == param_count(config)


def test_single_gate_has_one_branch_per_block():
    shapes = param_shapes(tiny_config(variant="single_gate"))
    assert "gcb0.conv_a.w" in shapes
    assert "gcb0.conv_b.w" not in shapes


def test_init_is_deterministic_and_truncated():
    config = tiny_config()
    first, second = init_params(config, seed=3), init_params(config, seed=3)
    for name, tensor in first.named_tensors().items():
        assert np.array_equal(tensor.data, second.names[name].data)
    weights = first.names["gcb0.conv_a.w"].data
    assert np.all(np.abs(weights) <= 0.04 + 1e-7)
    assert np.all(first.names["gcb0.ln_a.gamma"].data == 1)
    assert np.all(first.names["stem.b"].data == 0)
    assert not np.array_equal(weights, init_params(config, seed=4).names["gcb0.conv_a.w"].data)


@pytest.mark.parametrize("variant", VARIANTS)
def test_variants_preserve_length_and_width(variant):
    config = tiny_config(variant=variant)
    model = ConvNova(config, seed=1)
    x = one_hot("ACGTNACGTTGCAACG")
    assert model.forward(x).shape == (16, 8)
    batch = Tensor(np.stack([x.data, x.data]))
    assert model.forward(batch).shape == (2, 16, 8)


def test_unet_rejects_indivisible_length():
    model = ConvNova(tiny_config(variant="unet_downsample"), seed=0)
    with pytest.raises(PreconditionError):
        model.forward(one_hot("ACGTACGTACG"))


def test_forward_rejects_invalid_one_hot():
    with pytest.raises(DataFormatError):
        check_one_hot(Tensor(np.full((4, 5), 0.2)))
    with pytest.raises(ShapeError):
        check_one_hot(Tensor(np.zeros((4, 4))))


def test_heads_have_expected_shapes():
    x = Tensor(np.stack([one_hot("ACGTACGTAC").data] * 3))
    mlm = ConvNova(tiny_config(), seed=0)
    assert mlm.logits(x).shape == (3, 10, 4)
    sequence = ConvNova(tiny_config(head="sequence_class", n_classes=3), seed=0)
    assert sequence.logits(x).shape == (3, 3)
    token = ConvNova(tiny_config(head="token_class", n_classes=9), seed=0)
    assert token.logits(x).shape == (3, 10, 9)


def test_mlm_head_must_have_four_classes():
    model = ConvNova(tiny_config(head="mlm", n_classes=3), seed=0)
    with pytest.raises(ShapeError):
        model.logits(one_hot("ACGT"))


def test_with_head_copies_backbone_and_replaces_head():
    base = ConvNova(tiny_config(), seed=2)
    warm = base.with_head("sequence_class", 2, seed=9)
    assert warm.config.head == "sequence_class" and warm.config.n_classes == 2
    for name in base.params.backbone_names():
        assert np.array_equal(warm.params.names[name].data, base.params.names[name].data)
        assert warm.params.names[name] is not base.params.names[name]
    assert warm.params.head.w.shape == (8, 2)


def test_from_named_rejects_mismatched_tensors():
    config = tiny_config()
    named = dict(init_params(config, seed=0).named_tensors())
    named["mlp0.w"] = Tensor.zeros((8, 7))
    with pytest.raises(ShapeError):
        ModelParams.from_named(config, named)
    del named["mlp0.w"]
    with pytest.raises(ShapeError):
        ModelParams.from_named(config, named)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(kernel_size=4)
    with pytest.raises(ConfigError):
        ModelConfig(hidden_dim=0)
    with pytest.raises(ConfigError):
        ModelConfig(variant="transformer")
    with pytest.raises(ConfigError):
        ModelConfig(head="regression")
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"hidden_dim": 8, "layers": 3})
    assert ModelConfig(kernel_size=5).stem_kernel_size == 5
    config = tiny_config(variant="additive")
    assert ModelConfig.from_dict(config.to_dict()) == config


def test_width_for_param_budget_is_closest():
    config = tiny_config()
    for target in (500, 2_345, 10_000, 77_777):
        width = width_for_param_budget(config, target)
        best = min(range(1, 200), key=lambda w: (abs(param_count(tiny_config(hidden_dim=w)) - target), w))
        assert width == best


def test_parity_widths_match_dual_branch_budget():
    reference = ModelConfig()
    single = parity_config(ModelConfig(variant="single_gate"), reference)
    assert single.hidden_dim > reference.hidden_dim
    assert abs(param_count(single) - param_count(reference)) <= 0.02 * param_count(reference)

    unet = parity_config(ModelConfig(variant="unet_downsample"), reference)
    assert abs(param_count(unet) - param_count(reference)) <= 0.10 * param_count(reference)
    assert parity_width(reference, reference) == reference.hidden_dim


def test_model_info_reports_receptive_field():
    info = ConvNova(ModelConfig(hidden_dim=4), seed=0).get_model_info()
    assert info["dilations"] == [1, 1, 4, 16, 64]
    assert info["receptive_field"] == 697
    assert info["param_count"] == param_count(ModelConfig(hidden_dim=4))


def test_forward_is_deterministic_in_float64():
    config = tiny_config()
    with precision("float64"):
        first = ConvNova(config, seed=5).forward(one_hot("ACGTTGCA")).data
        second = ConvNova(config, seed=5).forward(one_hot("ACGTTGCA")).data
    assert np.array_equal(first, second)


def scalar_conv(x, w, b, dilation):
    k, c_in, c_out = w.shape
    pad = dilation * (k - 1) // 2
    out = np.zeros((x.shape[0], c_out))
    for t in range(x.shape[0]):
        for o in range(c_out):
            total = b[o]
            for j in range(k):
                source = t + j * dilation - pad
                if 0 <= source < x.shape[0]:
                    total += sum(w[j, i, o] * x[source, i] for i in range(c_in))
            out[t, o] = total
    return out


def scalar_layer_norm(x, gamma, beta, eps=1e-5):
    out = np.zeros_like(x)
    for t, row in enumerate(x):
        mean = sum(row) / len(row)
        variance = sum((v - mean) ** 2 for v in row) / len(row)
        out[t] = [(v - mean) / math.sqrt(variance + eps) * g + bb for v, g, bb in zip(row, gamma, beta)]
    return out


scalar_gelu = np.vectorize(lambda v: 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))))
scalar_sigmoid = np.vectorize(lambda v: 1.0 / (1.0 + math.exp(-v)))


def random_block(d, k, rng, std=0.5):
    def conv():
        return ConvParams(Tensor(rng.normal((k, d, d), std)), Tensor(rng.normal((d,), std)))

    def norm():
        return NormParams(Tensor(1.0 + rng.normal((d,), 0.1)), Tensor(rng.normal((d,), 0.1)))

    return GcbParams(norm(), conv(), norm(), conv())


def branch_path(x, ln, conv, dilation):
    normed = scalar_layer_norm(x, ln.gamma.data, ln.beta.data)
    return scalar_conv(normed, conv.w.data, conv.b.data, dilation)


def test_gcb_forward_matches_scalar_oracle():
    with precision("float64"):
        rng = Rng(11)
        block = random_block(3, 3, rng)
        a, b = rng.normal((6, 3)), rng.normal((6, 3))
        out = gcb_forward(BranchState(Tensor(a), Tensor(b)), block, dilation=2)

    h = scalar_gelu(branch_path(a, block.ln_a, block.conv_a, 2))
    g = scalar_sigmoid(branch_path(b, block.ln_b, block.conv_b, 2))
    assert np.max(np.abs(out.a.data - (a + h * g))) < 1e-6
    assert np.max(np.abs(out.b.data - (b + g))) < 1e-6


def test_gcb_gate_lies_strictly_between_zero_and_one():
    with precision("float64"):
        params = init_params(tiny_config(hidden_dim=6), seed=2)
        rng = Rng(3)
        for block in params.gcbs:
            b = rng.normal((20, 6))
            state = BranchState(Tensor(rng.normal((20, 6))), Tensor(b))
            gate = gcb_forward(state, block, block.dilation).b.data - b
            assert np.all(gate > 0) and np.all(gate < 1)


def test_single_gate_zero_weights_is_identity():
    rng = Rng(0)
    x = Tensor(rng.normal((7, 4)))
    out = gcb_forward_single(x, zero_block(4), dilation=1)
    np.testing.assert_array_equal(out.data, x.data)


def test_single_gate_large_activation_passes_through():
    with precision("float64"):
        block = zero_block(4)
        block.conv_a.b.data[:] = 20.0
        x = Tensor(Rng(1).normal((5, 4)))
        out = gcb_forward_single(x, block)
    assert np.max(np.abs(out.data - (x.data + 20.0))) < 1e-6


def test_single_gate_matches_scalar_oracle():
    with precision("float64"):
        rng = Rng(5)
        block = random_block(2, 3, rng)
        x = rng.normal((4, 2))
        out = gcb_forward_single(Tensor(x), block, dilation=1)

    z = branch_path(x, block.ln_a, block.conv_a, 1)
    assert np.max(np.abs(out.data - (x + scalar_gelu(z) * scalar_sigmoid(z)))) < 1e-6


def test_additive_zero_weights_leave_state_unchanged():
    rng = Rng(2)
    a, b = Tensor(rng.normal((6, 5))), Tensor(rng.normal((6, 5)))
    out = gcb_forward_additive(BranchState(a, b), zero_block(5), dilation=2)
    np.testing.assert_array_equal(out.a.data, a.data)
    np.testing.assert_array_equal(out.b.data, b.data)


def test_additive_with_shared_branches_doubles_update():
    with precision("float64"):
        rng = Rng(8)
        block = random_block(3, 3, rng)
        block.ln_b, block.conv_b = block.ln_a, block.conv_a
        a = rng.normal((6, 3))
        out = gcb_forward_additive(BranchState(Tensor(a), Tensor(a)), block, dilation=1)

    h = scalar_gelu(branch_path(a, block.ln_a, block.conv_a, 1))
    assert np.max(np.abs(out.a.data - (a + 2 * h))) < 1e-6
    assert np.max(np.abs(out.b.data - (a + h))) < 1e-6


def test_additive_matches_scalar_oracle():
    with precision("float64"):
        rng = Rng(9)
        block = random_block(3, 3, rng)
        a, b = rng.normal((6, 3)), rng.normal((6, 3))
        out = gcb_forward_additive(BranchState(Tensor(a), Tensor(b)), block, dilation=2)

    h = scalar_gelu(branch_path(a, block.ln_a, block.conv_a, 2))
    g = scalar_gelu(branch_path(b, block.ln_b, block.conv_b, 2))
    assert np.max(np.abs(out.a.data - (a + h + g))) < 1e-6
    assert np.max(np.abs(out.b.data - (b + g))) < 1e-6


def test_unet_zero_bottleneck_keeps_skip_path():
    config = tiny_config(variant="unet_downsample", n_gcb=2)
    params = init_params(config, seed=0)
    for block in params.unet.bottleneck:
        for conv in (block.conv_a, block.conv_b):
            conv.w.data[...] = 0
            conv.b.data[...] = 0
    rng = Rng(4)
    a = Tensor(rng.normal((16, 8)))
    out = unet_block_forward(BranchState(a, Tensor(rng.normal((16, 8)))), params.unet)
    np.testing.assert_array_equal(out.a.data, a.data)
    assert out.b.shape == (16, 8)


@pytest.mark.parametrize("variant", VARIANTS)
def test_zero_parameters_give_mlp_bias(variant):
    config = tiny_config(variant=variant)
    params = init_params(config, seed=0)
    for tensor in params.named_tensors().values():
        tensor.data[...] = 0
    bias = np.arange(1, 9, dtype=params.mlp[1].b.data.dtype)
    params.mlp[1].b.data[...] = bias
    features = model_forward(one_hot("ACGTNACGTTGCAACG"), params, config)
    np.testing.assert_array_equal(features.data, np.broadcast_to(bias, (16, 8)))


def test_init_weight_spread():
    config = ModelConfig(hidden_dim=112, n_gcb=1, kernel_size=9)
    weights = init_params(config, seed=0).names["gcb0.conv_a.w"].data
    assert weights.size >= 100_000
    assert 0.017 <= float(np.std(weights)) <= 0.021


def test_class_logits_on_single_position():
    with precision("float64"):
        rng = Rng(6)
        row = rng.normal((1, 5))
        head = AffineParams(Tensor(rng.normal((5, 3))), Tensor(rng.normal((3,))))
        logits = class_logits(Tensor(row), head)
    assert logits.shape == (3,)
    assert np.max(np.abs(logits.data - (row[0] @ head.w.data + head.b.data))) < 1e-6
