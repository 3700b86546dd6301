"""Tests for boundary detection, boundary-guided enhancement, scale-aware aggregation and the full network."""
import numpy as np
import pytest
from pydantic import ValidationError

from pbeunet import network
from pbeunet.data_io import batch_samples, synth_generate
from pbeunet.errors import ShapeError
from pbeunet.gradcheck import NETWORK_COORDS, TOLERANCE, block_cases, gradcheck, module_cases, network_case
from pbeunet.layers import ModuleParams, init_params
from pbeunet.losses import total_loss
from pbeunet.models import BgfeExpansion, BgfeStage, FusionMode, LossWeights, PbeConfig, SynthConfig
from pbeunet.rng import named_seed
from pbeunet.tensor import Tensor, backward, no_grad, precision


def _build(specs, seed: int = 0) -> ModuleParams:
    params = ModuleParams()
    for name, spec in specs:
        params.merge(name, init_params(spec, named_seed(seed, name)))
    return params


def _all_ones_kernels(params: ModuleParams) -> None:
    for name, tensor, _ in params:
        if name.endswith("weight"):
            tensor.data[...] = 1.0
        elif name.endswith("bias"):
            tensor.data[...] = 0.0


def _impulse(channels: int, size: int) -> Tensor:
    data = np.zeros((1, channels, size, size))
    data[:, :, size // 2, size // 2] = 1.0
    return Tensor(data)


def _support(plane: np.ndarray):
    rows, cols = np.nonzero(plane)
    return rows.max() - rows.min() + 1, cols.max() - cols.min() + 1, len(rows)


def test_forward_shapes_small(small_config):
    params = network.init_network(small_config, 0)
    image = Tensor(np.random.default_rng(0).uniform(size=(2, 1, 32, 32)))
    out = network.pbe_forward(image, small_config, params, training=True)
    assert out.mask_prob.shape == (2, 1, 32, 32)
    assert out.mask_logit_map.shape == (2, 1, 32, 32)
    assert [b.shape[2] for b in out.boundary_probs] == [4, 8, 16, 32]
    assert ((out.mask_prob.data > 0) & (out.mask_prob.data < 1)).all()
    for b in out.boundary_probs:
        assert ((b.data > 0) & (b.data < 1)).all()


def test_forward_shapes_default_256():
    config = PbeConfig()
    params = network.init_network(config, 0)
    image = Tensor(np.random.default_rng(1).uniform(size=(1, 1, 256, 256)))
    with no_grad():
        out = network.pbe_forward(image, config, params, training=False)
    assert out.mask_prob.shape == (1, 1, 256, 256)
    assert len(out.boundary_probs) == 4
    assert [b.shape[2:] for b in out.boundary_probs] == [(32, 32), (64, 64), (128, 128), (256, 256)]
    assert np.isfinite(out.mask_prob.data).all()


def test_input_not_divisible_by_16(small_config):
    params = network.init_network(small_config, 0)
    with pytest.raises(ShapeError):
        network.pbe_forward(Tensor(np.zeros((1, 1, 40, 40))), small_config, params, training=False)


def test_single_value_bottleneck_rejected_in_training(small_config):
    params = network.init_network(small_config, 0)
    with pytest.raises(ShapeError) as info:
        network.pbe_forward(Tensor(np.zeros((1, 1, 16, 16))), small_config, params, training=True)
    assert info.value.dim == "N"
    with no_grad():
        out = network.pbe_forward(Tensor(np.zeros((1, 1, 16, 16))), small_config, params, training=False)
    assert out.mask_prob.shape == (1, 1, 16, 16)
    pair = network.pbe_forward(Tensor(np.zeros((2, 1, 16, 16))), small_config, params, training=True)
    assert pair.mask_prob.shape == (2, 1, 16, 16)


def test_config_consistency_rules():
    with pytest.raises(ValidationError):
        PbeConfig(enable_bd=False, enable_bgfe=True)
    with pytest.raises(ValidationError):
        PbeConfig(base_channels=6)
    assert PbeConfig(base_channels=6, enable_saam=False).stage_channels() == [6, 12, 24, 48]


def test_bd_zero_head_gives_half():
    params = _build(network.bd_specs(8))
    params["conv.weight"].data[...] = 0.0
    params["conv.bias"].data[...] = 0.0
    features = Tensor(np.random.default_rng(2).normal(size=(2, 8, 6, 6)))
    b = network.bd_forward(features, params, training=True)
    assert b.shape == (2, 1, 6, 6)
    assert np.all(b.data == 0.5)


@pytest.mark.parametrize(
    "expansion, width",
    [(BgfeExpansion.DW3_DW5, 9), (BgfeExpansion.DW3, 5), (BgfeExpansion.NONE, 3)],
)
def test_bgfe_attention_impulse_support(expansion, width):
    config = PbeConfig(base_channels=8, bgfe_expansion=expansion)
    params = _build(network.bgfe_specs(8, config))
    _all_ones_kernels(params)
    attention = network.bgfe_attention(_impulse(1, 21), params, config, training=False).data
    for channel in attention[0]:
        assert _support(channel) == (width, width, width * width)


def test_saam_branch_four_impulse_support(small_config):
    params = _build(network.saam_specs(16, small_config))
    _all_ones_kernels(params)
    branches = network.saam_branches(_impulse(8, 31), params, small_config.saam_dilations)
    assert _support(branches[0].data[0, 0]) == (3, 3, 9)
    assert _support(branches[3].data[0, 0]) == (21, 21, 441)


def test_saam_zero_weights_is_identity(small_config):
    params = _build(network.saam_specs(16, small_config))
    for _, tensor in params.learnable():
        tensor.data[...] = 0.0
    d = Tensor(np.random.default_rng(3).normal(size=(2, 16, 8, 8)))
    out = network.saam_forward(d, params, small_config, training=True)
    assert np.array_equal(out.data, d.data)


@pytest.mark.parametrize("mode", list(FusionMode))
def test_fusion_modes_keep_shape(mode):
    config = PbeConfig(base_channels=8, fusion_mode=mode)
    params = _build(network.bgfe_specs(8, config))
    rng = np.random.default_rng(4)
    features = Tensor(rng.normal(size=(2, 8, 6, 6)))
    b = Tensor(rng.uniform(size=(2, 1, 6, 6)))
    out = network.bgfe_forward(features, b, params, config, training=True)
    assert out.shape == (2, 8, 6, 6)
    if mode == FusionMode.MULTIPLY:
        assert np.allclose(out.data, features.data * b.data)


def test_bgfe_zero_boundary_is_finite(small_config):
    params = _build(network.bgfe_specs(8, small_config))
    features = Tensor(np.random.default_rng(5).normal(size=(1, 8, 6, 6)))
    out = network.bgfe_forward(features, Tensor(np.zeros((1, 1, 6, 6))), params, small_config, training=True)
    assert np.isfinite(out.data).all()


def test_bgfe_boundary_must_match_features(small_config):
    params = _build(network.bgfe_specs(8, small_config))
    with pytest.raises(ShapeError):
        network.bgfe_forward(
            Tensor(np.zeros((1, 8, 6, 6))), Tensor(np.zeros((1, 1, 3, 3))), params, small_config, training=True
        )


def test_disabling_a_module_removes_its_parameters():
    full = network.init_network(PbeConfig(base_channels=8), 0)
    baseline = network.init_network(
        PbeConfig(base_channels=8, enable_bd=False, enable_bgfe=False, enable_saam=False), 0
    )
    bd_only = network.init_network(PbeConfig(base_channels=8, enable_bgfe=False, enable_saam=False), 0)
    for prefix in ("bd.", "bgfe.", "saam."):
        assert full.has_prefix(prefix)
        assert not baseline.has_prefix(prefix)
    assert bd_only.has_prefix("bd.") and not bd_only.has_prefix("bgfe.")
    shared = [name for name in baseline.names()]
    assert [n for n in full.names() if not n.startswith(("bd.", "bgfe.", "saam."))] == shared


def test_encoder_placement_parameters():
    encoder = network.init_network(PbeConfig(base_channels=8, bgfe_stage=BgfeStage.ENCODER), 0)
    both = network.init_network(PbeConfig(base_channels=8, bgfe_stage=BgfeStage.BOTH), 0)
    decoder = network.init_network(PbeConfig(base_channels=8), 0)
    for k, channels in enumerate((8, 16, 32, 64)):
        assert encoder[f"bd.enc.{k}.cbr.conv.weight"].shape == (channels, channels, 3, 3)
        assert encoder[f"bd.enc.{k}.conv.weight"].shape == (1, channels, 1, 1)
        assert encoder[f"bgfe.enc.{k}.fuse.conv.weight"].shape == (channels, channels + 1, 3, 3)
        assert both.has_prefix(f"bgfe.enc.{k}.") and both.has_prefix(f"bgfe.{k}.")
        assert not encoder.has_prefix(f"bd.{k}.") and not encoder.has_prefix(f"bgfe.{k}.")
        assert not decoder.has_prefix(f"bd.enc.{k}.")
    for name in decoder.names():
        assert both[name].data.tobytes() == decoder[name].data.tobytes(), name


@pytest.mark.parametrize(
    "stage, sizes",
    [
        (BgfeStage.ENCODER, [32, 16, 8, 4]),
        (BgfeStage.BOTH, [4, 8, 16, 32, 32, 16, 8, 4]),
    ],
)
def test_encoder_placement_forward(stage, sizes):
    config = PbeConfig(base_channels=8, bgfe_stage=stage)
    params = network.init_network(config, 0)
    images, masks, boundaries = batch_samples(synth_generate(SynthConfig(count=2, size=32, seed=0)))
    params.zero_grad()
    out = network.pbe_forward(images, config, params, training=True)
    assert out.mask_prob.shape == (2, 1, 32, 32)
    assert [b.shape[2] for b in out.boundary_probs] == sizes
    backward(total_loss(out, masks, boundaries, LossWeights(), require_boundary=True))
    for k in range(4):
        assert params[f"bd.enc.{k}.conv.weight"].grad.any()
        assert params[f"bgfe.enc.{k}.att_conv.weight"].grad is not None


def test_boundary_taps_leave_mask_path_unchanged():
    baseline_config = PbeConfig(base_channels=8, enable_bd=False, enable_bgfe=False, enable_saam=False)
    bd_config = PbeConfig(base_channels=8, enable_bgfe=False, enable_saam=False)
    image = Tensor(np.random.default_rng(6).uniform(size=(2, 1, 32, 32)))
    baseline = network.pbe_forward(image, baseline_config, network.init_network(baseline_config, 9), True)
    tapped = network.pbe_forward(image, bd_config, network.init_network(bd_config, 9), True)
    assert baseline.boundary_probs == []
    assert len(tapped.boundary_probs) == 4
    assert np.array_equal(baseline.mask_prob.data, tapped.mask_prob.data)


def test_forward_is_deterministic_per_seed(small_config):
    image = Tensor(np.random.default_rng(7).uniform(size=(1, 1, 32, 32)))
    first = network.pbe_forward(image, small_config, network.init_network(small_config, 5), False)
    second = network.pbe_forward(image, small_config, network.init_network(small_config, 5), False)
    assert first.mask_prob.data.tobytes() == second.mask_prob.data.tobytes()


def test_param_count_is_stable_and_in_range():
    config = PbeConfig()
    count = network.init_network(config, 0).count()
    assert count == network.init_network(config, 1).count()
    assert 1_000_000 <= count <= 10_000_000


def test_flops_scale_with_area(small_config):
    params_32, flops_32 = network.count_params_flops(small_config, size=32)
    params_64, flops_64 = network.count_params_flops(small_config, size=64)
    assert params_32 == params_64
    assert flops_64 == 4 * flops_32


@pytest.mark.parametrize("name", [case[0] for case in block_cases(0) + module_cases(0)])
def test_composite_gradients(name):
    with precision("f64-check"):
        cases = {case[0]: case for case in block_cases(0) + module_cases(0)}
        _, fn, tensors = cases[name]
        error, _ = gradcheck(fn, tensors, seed=2)
    assert error <= TOLERANCE


def test_full_network_gradients():
    with precision("f64-check"):
        _, fn, tensors = network_case(0)
        error, checked = gradcheck(fn, tensors, seed=3, max_coords=NETWORK_COORDS)
    assert checked > 0
    assert error <= TOLERANCE
