"""Tests for the parameter registry and the building blocks."""
import math

import numpy as np
import pytest
from pydantic import ValidationError

from pbeunet.errors import ShapeError
from pbeunet.layers import (
    ModuleParams,
    block_forward,
    cbr_forward,
    decoder_block_forward,
    eca_forward,
    eca_kernel_size,
    encoder_block_forward,
    init_params,
)
from pbeunet.models import BlockKind, BlockSpec
from pbeunet.tensor import Tensor


def _spec(kind: BlockKind, in_ch: int, out_ch: int, **extra) -> BlockSpec:
    return BlockSpec(kind=kind, in_ch=in_ch, out_ch=out_ch, **extra)


def test_cbr_parameter_shapes():
    params = init_params(_spec(BlockKind.CBR3X3, 4, 8), 0)
    assert params["conv.weight"].shape == (8, 4, 3, 3)
    assert params["bn.gamma"].shape == (8,)
    assert params["bn.beta"].shape == (8,)
    assert np.all(params["bn.gamma"].data == 1) and np.all(params["bn.beta"].data == 0)
    assert np.all(params["bn.running_mean"].data == 0) and np.all(params["bn.running_var"].data == 1)
    assert not params.is_learnable("bn.running_var")
    assert params.count() == 8 * 4 * 9 + 16


def test_init_is_deterministic():
    first = init_params(_spec(BlockKind.ENCODER, 3, 6), 42)
    second = init_params(_spec(BlockKind.ENCODER, 3, 6), 42)
    for (name_a, a, _), (name_b, b, _) in zip(first, second):
        assert name_a == name_b
        assert a.data.tobytes() == b.data.tobytes()


def test_kaiming_bound():
    weight = init_params(_spec(BlockKind.CBR3X3, 4, 8), 7)["conv.weight"].data
    bound = math.sqrt(6 / 36)
    assert bound == pytest.approx(0.4082, abs=1e-4)
    assert np.abs(weight).max() <= bound


def test_depthwise_spec_requires_equal_channels():
    with pytest.raises(ValidationError):
        _spec(BlockKind.DW3X3, 4, 8)


def test_cbr_preserves_spatial_size_and_is_nonnegative():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 7, 9)))
    out = cbr_forward(x, init_params(_spec(BlockKind.CBR3X3, 3, 5), 1), 3, training=True)
    assert out.shape == (2, 5, 7, 9)
    assert (out.data >= 0).all()


def test_cbr_channel_mismatch():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ShapeError):
        cbr_forward(x, init_params(_spec(BlockKind.CBR1X1, 3, 5), 1), 1, training=True)


@pytest.mark.parametrize(
    "channels, expected",
    [(64, 3), (16, 3), (8, 3), (128, 5), (256, 5)],
)
def test_eca_kernel_size(channels, expected):
    assert eca_kernel_size(channels) == expected


def test_eca_zero_kernel_halves_input():
    x = Tensor(np.random.default_rng(2).uniform(size=(2, 64, 3, 3)))
    params = init_params(_spec(BlockKind.ECA, 64, 64), 0)
    params["weight"].data[...] = 0.0
    assert np.allclose(eca_forward(x, params).data, x.data / 2)


def test_eca_zero_input_gives_zero():
    params = init_params(_spec(BlockKind.ECA, 16, 16), 0)
    assert np.all(eca_forward(Tensor(np.zeros((1, 16, 4, 4))), params).data == 0)


def test_eca_scales_by_values_in_unit_interval():
    rng = np.random.default_rng(3)
    x = Tensor(rng.uniform(0.5, 1.0, size=(1, 8, 4, 4)))
    out = eca_forward(x, init_params(_spec(BlockKind.ECA, 8, 8), 4)).data
    ratio = out / x.data
    assert np.allclose(ratio, ratio[:, :, :1, :1])
    assert ((ratio > 0) & (ratio < 1)).all()


def test_encoder_and_decoder_shapes():
    rng = np.random.default_rng(4)
    encoder = init_params(_spec(BlockKind.ENCODER, 1, 8), 0)
    skip = encoder_block_forward(Tensor(rng.uniform(size=(1, 1, 16, 16))), encoder, training=True)
    assert skip.shape == (1, 8, 16, 16)
    decoder = init_params(_spec(BlockKind.DECODER, 16, 8, skip_ch=8), 0)
    low = Tensor(rng.uniform(size=(1, 16, 8, 8)))
    assert decoder_block_forward(low, skip, decoder, training=True).shape == (1, 8, 16, 16)


def test_block_forward_dispatches_dilated_depthwise():
    spec = _spec(BlockKind.DW_DILATED, 4, 4, dilation=3)
    out = block_forward(spec, Tensor(np.ones((1, 4, 10, 10))), init_params(spec, 0))
    assert out.shape == (1, 4, 10, 10)


def test_module_params_views_share_tensors():
    root = ModuleParams()
    root.merge("encoder.0", init_params(_spec(BlockKind.ENCODER, 1, 4), 0))
    view = root.sub("encoder.0").sub("cbr1")
    assert view["conv.weight"] is root["encoder.0.cbr1.conv.weight"]
    assert root["encoder.0.cbr1.conv.weight"].name == "encoder.0.cbr1.conv.weight"
    with pytest.raises(KeyError):
        root.add("encoder.0.cbr1.conv.weight", Tensor(np.zeros(1)))


def test_zero_grad_gives_zero_arrays():
    params = init_params(_spec(BlockKind.CONV1X1, 2, 3), 0)
    params.zero_grad()
    for _, tensor in params.learnable():
        assert tensor.grad is not None and not tensor.grad.any()
