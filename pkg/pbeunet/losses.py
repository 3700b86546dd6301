"""Segmentation and boundary losses."""
from typing import Sequence

from pbeunet import functional as F
from pbeunet.errors import ShapeError
from pbeunet.models import LossWeights, PbeOutput
from pbeunet.tensor import Tensor, add, check_same_shape, clip, log, mul, sum_per_sample, tensor_mean

BOUNDARY_STAGES = 4
BOUNDARY_MAP_COUNTS = (BOUNDARY_STAGES, 2 * BOUNDARY_STAGES)


def dice_loss(y_hat: Tensor, y: Tensor, smooth_eps: float = 1e-6) -> Tensor:
    """1 - (2*sum(y_hat*y) + eps) / (sum(y_hat^2) + sum(y^2) + eps), per sample, averaged over the batch."""
    check_same_shape("dice_loss", y_hat, y)
    overlap = sum_per_sample(mul(y_hat, y))
    denominator = add(sum_per_sample(mul(y_hat, y_hat)), sum_per_sample(mul(y, y)))
    ratio = (overlap * 2.0 + smooth_eps) / (denominator + smooth_eps)
    return tensor_mean(1.0 - ratio)


def bce_loss(y_hat: Tensor, y: Tensor, clamp_eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy over every pixel of the batch."""
    check_same_shape("bce_loss", y_hat, y)
    p = clip(y_hat, clamp_eps, 1.0 - clamp_eps)
    per_pixel = add(mul(y, log(p)), mul(1.0 - y, log(1.0 - p)))
    return -tensor_mean(per_pixel)


def boundary_loss(boundary_probs: Sequence[Tensor], b_gt: Tensor, clamp_eps: float = 1e-7) -> Tensor:
    """Mean over the stage maps of the BCE between each upsampled map and the boundary target.

    Four maps when the boundary modules sit in one half of the network, eight
    when they sit in both the encoder and the decoder.
    """
    if len(boundary_probs) not in BOUNDARY_MAP_COUNTS:
        raise ShapeError("boundary_loss", "K", " or ".join(map(str, BOUNDARY_MAP_COUNTS)), len(boundary_probs))
    height, width = b_gt.shape[2], b_gt.shape[3]
    total = None
    for stage in boundary_probs:
        if stage.shape[2:] != (height, width):
            stage = F.upsample_bilinear(stage, height, width)
        term = bce_loss(stage, b_gt, clamp_eps)
        total = term if total is None else add(total, term)
    return total * (1.0 / len(boundary_probs))


def segmentation_loss(y_hat: Tensor, y: Tensor, weights: LossWeights) -> Tensor:
    return add(dice_loss(y_hat, y, weights.smooth_eps), bce_loss(y_hat, y, weights.clamp_eps) * weights.lambda1)


def total_loss(
    out: PbeOutput,
    y: Tensor,
    b_gt: Tensor,
    weights: LossWeights,
    require_boundary: bool = False,
) -> Tensor:
    """Segmentation loss plus lambda2 times the boundary loss.

    Without boundary maps (boundary detection disabled) or with lambda2 = 0
    the result is the segmentation loss itself. `require_boundary` turns a
    missing boundary list into an error.
    """
    seg = segmentation_loss(out.mask_prob, y, weights)
    if not out.boundary_probs and not require_boundary:
        return seg
    boundary = boundary_loss(out.boundary_probs, b_gt, weights.clamp_eps)
    if weights.lambda2 == 0:
        return seg
    return add(seg, boundary * weights.lambda2)
