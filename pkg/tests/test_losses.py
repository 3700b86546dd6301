"""Tests for the segmentation and boundary losses."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pbeunet import losses
from pbeunet.errors import ShapeError
from pbeunet.gradcheck import TOLERANCE, gradcheck, loss_cases
from pbeunet.models import LossWeights, PbeOutput
from pbeunet.tensor import Tensor, backward, precision


def _const(value: float, size: int = 32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full((1, 1, size, size), value), requires_grad=requires_grad)


def _output(mask: Tensor, stages) -> PbeOutput:
    return PbeOutput(mask_logit_map=mask, mask_prob=mask, boundary_probs=list(stages))


def test_dice_of_half_prediction_on_full_mask(f64):
    assert losses.dice_loss(_const(0.5), _const(1.0)).item() == pytest.approx(0.2, abs=1e-9)


def test_perfect_and_empty_predictions_give_zero_dice_loss(f64):
    mask = np.zeros((1, 1, 32, 32))
    mask[0, 0, 8:20, 4:30] = 1.0
    assert losses.dice_loss(Tensor(mask), Tensor(mask)).item() == pytest.approx(0.0, abs=1e-9)
    assert losses.dice_loss(_const(0.0), _const(0.0)).item() == pytest.approx(0.0, abs=1e-12)


def test_dice_loss_averages_per_sample(f64):
    y_hat = Tensor(np.concatenate([np.full((1, 1, 32, 32), 0.5), np.ones((1, 1, 32, 32))]))
    y = Tensor(np.ones((2, 1, 32, 32)))
    assert losses.dice_loss(y_hat, y).item() == pytest.approx(0.1, abs=1e-9)


def test_bce_of_half_is_log_two(f64):
    assert losses.bce_loss(_const(0.5), _const(1.0)).item() == pytest.approx(math.log(2))
    assert losses.bce_loss(_const(0.5), _const(0.0)).item() == pytest.approx(math.log(2))


def test_bce_clamps_saturated_predictions(f64):
    value = losses.bce_loss(_const(0.0), _const(1.0)).item()
    assert math.isfinite(value)
    assert value == pytest.approx(-math.log(1e-7), rel=1e-6)


def test_boundary_loss_upsamples_every_stage(f64):
    stages = [_const(0.5, size) for size in (4, 8, 16, 32)]
    value = losses.boundary_loss(stages, _const(0.0)).item()
    assert value == pytest.approx(math.log(2))


def test_boundary_loss_needs_four_stages(f64):
    with pytest.raises(ShapeError) as info:
        losses.boundary_loss([_const(0.5)] * 3, _const(0.0))
    assert info.value.dim == "K"


def test_boundary_loss_averages_eight_stage_maps(f64):
    stages = [_const(0.5, size) for size in (4, 8, 16, 32)] + [_const(0.25, size) for size in (32, 16, 8, 4)]
    value = losses.boundary_loss(stages, _const(0.0)).item()
    assert value == pytest.approx((math.log(2) - math.log(0.75)) / 2)
    with pytest.raises(ShapeError):
        losses.boundary_loss(stages[:5], _const(0.0))


def test_total_loss_hand_example(f64):
    stages = [_const(0.5, size) for size in (4, 8, 16, 32)]
    out = _output(_const(0.5), stages)
    value = losses.total_loss(out, _const(1.0), _const(1.0), LossWeights()).item()
    assert value == pytest.approx(0.2 + 1.2 * math.log(2), abs=1e-6)
    assert value == pytest.approx(1.0318, abs=1e-4)


def test_lambda2_zero_is_segmentation_loss(f64):
    stages = [_const(0.3, size) for size in (4, 8, 16, 32)]
    weights = LossWeights(lambda2=0.0)
    out = _output(_const(0.6), stages)
    total = losses.total_loss(out, _const(1.0), _const(0.0), weights).item()
    assert total == losses.segmentation_loss(_const(0.6), _const(1.0), weights).item()


def test_missing_boundary_maps(f64):
    out = _output(_const(0.5), [])
    weights = LossWeights()
    seg = losses.segmentation_loss(_const(0.5), _const(1.0), weights).item()
    assert losses.total_loss(out, _const(1.0), _const(0.0), weights).item() == seg
    with pytest.raises(ShapeError):
        losses.total_loss(out, _const(1.0), _const(0.0), weights, require_boundary=True)


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        losses.dice_loss(_const(0.5, 32), _const(1.0, 16))


def test_loss_gradient_reaches_prediction(f64):
    y_hat = _const(0.5, requires_grad=True)
    backward(losses.segmentation_loss(y_hat, _const(1.0), LossWeights()))
    assert y_hat.grad is not None
    assert (y_hat.grad < 0).all()


@pytest.mark.parametrize("name", [case[0] for case in loss_cases(0)])
def test_loss_gradients_match_finite_differences(name):
    with precision("f64-check"):
        cases = {case[0]: case for case in loss_cases(0)}
        _, fn, tensors = cases[name]
        error, checked = gradcheck(fn, tensors, seed=5)
    assert checked > 0
    assert error <= TOLERANCE


@settings(max_examples=25, deadline=None)
@given(st.permutations(range(4)), st.integers(min_value=0, max_value=2**16))
def test_batch_losses_ignore_sample_order(order, seed):
    rng = np.random.default_rng(seed)
    y_hat = rng.uniform(0.01, 0.99, size=(4, 1, 8, 8))
    y = (rng.uniform(size=(4, 1, 8, 8)) > 0.5).astype(np.float64)
    with precision("f64-check"):
        for loss in (losses.dice_loss, losses.bce_loss):
            before = loss(Tensor(y_hat), Tensor(y)).item()
            after = loss(Tensor(y_hat[list(order)]), Tensor(y[list(order)])).item()
            assert after == pytest.approx(before, rel=1e-12)
