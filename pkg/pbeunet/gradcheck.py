"""Gradcheck Agent - central finite differences against the tape, in float64.

The objective for an operation f is sum(f(inputs) * R) with a fixed random
R. Inputs are perturbed in place, so closures that reference the checked
tensors see every perturbation. Every coordinate is compared on its own;
only the full network is checked on a seeded subset of coordinates.
"""
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from pbeunet import functional as F
from pbeunet import layers
from pbeunet import losses
from pbeunet import network
from pbeunet.console import echo
from pbeunet.models import BlockKind, BlockSpec, FusionMode, GradcheckResult, LossWeights, PbeConfig, PbeOutput
from pbeunet.rng import make_rng, named_seed
from pbeunet.tensor import Tensor, backward, no_grad, precision
import pbeunet.tensor as T

TOLERANCE = 1e-4
STEP = 1e-5
# Below this magnitude a gradient is compared absolutely; f64 round-off in the
# objective divided by 2*STEP sits several decades under it.
GRAD_FLOOR = 1e-3
NETWORK_CASE = "pbe_net"
NETWORK_COORDS = 8
RELU_MARGIN = 1e-3

Case = Tuple[str, Callable[[], Tensor], List[Tensor]]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, GRAD_FLOOR)."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), GRAD_FLOOR)
    return np.abs(analytic - numeric) / scale


def gradcheck(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    seed: int = 0,
    step: float = STEP,
    max_coords: Optional[int] = None,
    tolerance: float = TOLERANCE,
) -> Tuple[float, int]:
    """(max elementwise relative error over `tensors`, compared coordinate count).

    With `max_coords` set, tensors larger than it are checked on a seeded
    subset. A coordinate that misses `tolerance` is re-measured at half the
    step; when the two differences disagree the objective has a kink inside
    the step (relu, max pooling) and the coordinate is left out.
    """
    rng = make_rng(seed)
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    out = fn()
    weights = Tensor(rng.standard_normal(out.shape))
    backward(T.tensor_sum(T.mul(out, weights)))

    def objective() -> float:
        with no_grad():
            return float((fn().data * weights.data).sum())

    def central(flat: np.ndarray, c: int, h: float) -> float:
        original = flat[c]
        flat[c] = original + h
        plus = objective()
        flat[c] = original - h
        minus = objective()
        flat[c] = original
        return (plus - minus) / (2 * h)

    worst, checked = 0.0, 0
    for t in tensors:
        analytic = (np.zeros_like(t.data) if t.grad is None else t.grad).reshape(-1)
        flat = t.data.reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, max_coords, replace=False)
        for c in coords:
            numeric = central(flat, c, step)
            error = float(relative_error(analytic[c], numeric))
            if error > tolerance:
                half = central(flat, c, step / 2)
                if float(relative_error(half, numeric)) > tolerance:
                    continue
            worst = max(worst, error)
            checked += 1
    return worst, checked


def _rand(rng: np.random.Generator, *shape: int, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape))


def _normal(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _off_kink(rng: np.random.Generator, *shape: int) -> Tensor:
    """N(0, 1) values pushed out of (-RELU_MARGIN, RELU_MARGIN)."""
    values = rng.standard_normal(shape)
    return Tensor(np.where(np.abs(values) < RELU_MARGIN, 2 * RELU_MARGIN, values))




def _block(spec: BlockSpec, name: str, seed: int) -> layers.ModuleParams:
    return layers.init_params(spec, named_seed(seed, name))


def _learnable(params: layers.ModuleParams) -> List[Tensor]:
    return [t for _, t in params.learnable()]


def _eval_stats(params: layers.ModuleParams, rng: np.random.Generator) -> None:
    """Non-trivial running statistics so eval-mode BN is not the identity."""
    for name, tensor, learnable in params:
        if name.endswith("running_mean"):
            tensor.data[...] = rng.uniform(-0.2, 0.2, size=tensor.shape)
        elif name.endswith("running_var"):
            tensor.data[...] = rng.uniform(0.5, 1.5, size=tensor.shape)


def primitive_cases(seed: int) -> List[Case]:
    rng = make_rng(seed)
    a, b = _normal(rng, 2, 3, 4, 4), _normal(rng, 2, 3, 4, 4)
    kinked = _off_kink(rng, 2, 3, 4, 4)
    positive = _rand(rng, 2, 3, 4, 4, low=0.5, high=2.0)
    inside = _rand(rng, 2, 3, 4, 4, low=0.1, high=0.9)
    x = _normal(rng, 2, 4, 6, 6)
    w3 = _normal(rng, 3, 4, 3, 3)
    bias = _normal(rng, 3)
    w_grouped = _normal(rng, 4, 2, 3, 3)
    w_dw = _normal(rng, 4, 1, 3, 3)
    bn_x = _normal(rng, 2, 3, 4, 4)
    gamma, beta = _rand(rng, 3, low=0.5, high=1.5), _rand(rng, 3)
    running_mean, running_var = Tensor(rng.uniform(-0.2, 0.2, 3)), Tensor(rng.uniform(0.5, 1.5, 3))
    small = _normal(rng, 1, 2, 3, 5)
    vec, kernel = _normal(rng, 2, 6), _normal(rng, 3)
    scales = _normal(rng, 2, 3)
    return [
        ("add", lambda: a + b, [a, b]),
        ("mul", lambda: a * b, [a, b]),
        ("sub", lambda: a - b, [a, b]),
        ("div", lambda: a / positive, [a, positive]),
        ("scalar_ops", lambda: (a * 3.0 + 1.0) / 2.0 - a, [a]),
        ("relu", lambda: T.relu(kinked), [kinked]),
        ("sigmoid", lambda: T.sigmoid(a), [a]),
        ("log", lambda: T.log(positive), [positive]),
        ("clip", lambda: T.clip(inside, 0.05, 0.95), [inside]),
        ("sum", lambda: T.tensor_sum(a), [a]),
        ("mean", lambda: T.tensor_mean(a), [a]),
        ("sum_per_sample", lambda: T.sum_per_sample(a), [a]),
        ("reshape", lambda: T.reshape(a, (2, 3, 16)), [a]),
        ("conv2d", lambda: F.conv2d(x, w3, bias, pad=1), [x, w3, bias]),
        ("conv2d_strided_dilated", lambda: F.conv2d(x, w3, None, stride=2, pad=2, dilation=2), [x, w3]),
        ("conv2d_grouped", lambda: F.conv2d(x, w_grouped, None, pad=1, groups=2), [x, w_grouped]),
        ("conv2d_depthwise", lambda: F.conv2d(x, w_dw, None, pad=3, dilation=3, groups=4), [x, w_dw]),
        ("batchnorm_train", lambda: F.batchnorm2d(bn_x, gamma, beta, None, None, True), [bn_x, gamma, beta]),
        (
            "batchnorm_eval",
            lambda: F.batchnorm2d(bn_x, gamma, beta, running_mean, running_var, False),
            [bn_x, gamma, beta],
        ),
        ("concat_channels", lambda: F.concat_channels([a, b]), [a, b]),
        ("split_channels", lambda: F.concat_channels(F.split_channels(a, [1, 2])[::-1]), [a]),
        ("maxpool2x2", lambda: F.maxpool2x2(a), [a]),
        ("upsample_bilinear", lambda: F.upsample_bilinear(small, 7, 10), [small]),
        ("global_avg_pool", lambda: F.global_avg_pool(a), [a]),
        ("conv1d_channels", lambda: F.conv1d_channels(vec, kernel), [vec, kernel]),
        ("scale_channels", lambda: F.scale_channels(a, scales), [a, scales]),
    ]


def block_cases(seed: int) -> List[Case]:
    rng = make_rng(seed + 1)
    x = _normal(rng, 2, 4, 6, 6)
    cbr3 = _block(BlockSpec(kind=BlockKind.CBR3X3, in_ch=4, out_ch=6), "cbr3", seed)
    cbr1 = _block(BlockSpec(kind=BlockKind.CBR1X1, in_ch=4, out_ch=6), "cbr1", seed)
    eca = _block(BlockSpec(kind=BlockKind.ECA, in_ch=4, out_ch=4), "eca", seed)
    dw = _block(BlockSpec(kind=BlockKind.DW_DILATED, in_ch=4, out_ch=4, dilation=2), "dw", seed)
    encoder = _block(BlockSpec(kind=BlockKind.ENCODER, in_ch=4, out_ch=4), "encoder", seed)
    decoder = _block(BlockSpec(kind=BlockKind.DECODER, in_ch=4, out_ch=4, skip_ch=4), "decoder", seed)
    low = _normal(rng, 2, 4, 3, 3)
    return [
        ("cbr3x3", lambda: layers.cbr_forward(x, cbr3, 3, True), [x] + _learnable(cbr3)),
        ("cbr1x1", lambda: layers.cbr_forward(x, cbr1, 1, True), [x] + _learnable(cbr1)),
        ("eca", lambda: layers.eca_forward(x, eca), [x] + _learnable(eca)),
        ("dw_dilated", lambda: layers.dw_forward(x, dw, 2), [x] + _learnable(dw)),
        ("encoder_block", lambda: layers.encoder_block_forward(x, encoder, True), [x] + _learnable(encoder)),
        (
            "decoder_block",
            lambda: layers.decoder_block_forward(low, x, decoder, True),
            [low, x] + _learnable(decoder),
        ),
    ]


def module_cases(seed: int) -> List[Case]:
    rng = make_rng(seed + 2)
    config = PbeConfig(base_channels=8)
    channels = 8
    features = _normal(rng, 2, channels, 6, 6)
    boundary = _rand(rng, 2, 1, 6, 6, low=0.05, high=0.95)
    cases: List[Case] = []

    bd = layers.ModuleParams()
    for name, spec in network.bd_specs(channels):
        bd.merge(name, _block(spec, f"bd.{name}", seed))
    cases.append(("bd", lambda: network.bd_forward(features, bd, True), [features] + _learnable(bd)))

    for mode in FusionMode:
        mode_config = config.model_copy(update={"fusion_mode": mode})
        params = layers.ModuleParams()
        for name, spec in network.bgfe_specs(channels, mode_config):
            params.merge(name, _block(spec, f"bgfe.{name}", seed))

        def run(params=params, mode_config=mode_config) -> Tensor:
            return network.bgfe_forward(features, boundary, params, mode_config, True)

        cases.append((f"bgfe[{mode.value}]", run, [features, boundary] + _learnable(params)))

    saam = layers.ModuleParams()
    for name, spec in network.saam_specs(channels, config):
        saam.merge(name, _block(spec, f"saam.{name}", seed))
    cases.append(("saam", lambda: network.saam_forward(features, saam, config, True), [features] + _learnable(saam)))
    return cases


def network_case(seed: int, sampled_tensors: int = 16) -> Case:
    """Full network at 32x32, eval-mode BN, image plus a seeded subset of parameters."""
    rng = make_rng(seed + 3)
    config = PbeConfig(base_channels=8)
    params = network.init_network(config, seed)
    _eval_stats(params, rng)
    image = _rand(rng, 1, 1, 32, 32, low=0.0, high=1.0)
    learnable = _learnable(params)
    picks = sorted(rng.choice(len(learnable), size=min(sampled_tensors, len(learnable)), replace=False))

    def run() -> Tensor:
        return network.pbe_forward(image, config, params, training=False).mask_logit_map

    return NETWORK_CASE, run, [image] + [learnable[k] for k in picks]


def loss_cases(seed: int) -> List[Case]:
    rng = make_rng(seed + 4)
    weights = LossWeights()
    y_hat = _rand(rng, 2, 1, 6, 6, low=0.05, high=0.95)
    y = Tensor((rng.uniform(size=(2, 1, 6, 6)) > 0.5).astype(np.float64))
    b_gt = Tensor((rng.uniform(size=(2, 1, 6, 6)) > 0.8).astype(np.float64))
    stages = [_rand(rng, 2, 1, s, s, low=0.05, high=0.95) for s in (1, 2, 3, 6)]

    def total() -> Tensor:
        out = PbeOutput(mask_logit_map=y_hat, mask_prob=y_hat, boundary_probs=stages)
        return losses.total_loss(out, y, b_gt, weights)

    return [
        ("dice_loss", lambda: losses.dice_loss(y_hat, y), [y_hat]),
        ("bce_loss", lambda: losses.bce_loss(y_hat, y), [y_hat]),
        ("boundary_loss", lambda: losses.boundary_loss(stages, b_gt), list(stages)),
        ("total_loss", total, [y_hat] + list(stages)),
    ]


def all_cases(seed: int = 0) -> List[Case]:
    return primitive_cases(seed) + block_cases(seed) + module_cases(seed) + [network_case(seed)] + loss_cases(seed)


class GradcheckAgent:
    """Agent responsible for verifying every backward rule numerically."""

    def __init__(self, tolerance: float = TOLERANCE, verbose: bool = True):
        self.tolerance = tolerance
        self.verbose = verbose

    def run(self, seed: int = 0) -> List[GradcheckResult]:
        results = []
        with precision("f64-check"):
            cases = all_cases(seed)
            if self.verbose:
                echo(f"🤖 Gradcheck Agent: Checking {len(cases)} operations in float64")
            for name, fn, tensors in cases:
                max_coords = NETWORK_COORDS if name == NETWORK_CASE else None
                error, coords = gradcheck(fn, tensors, seed=named_seed(seed, name), max_coords=max_coords)
                result = GradcheckResult(name=name, max_rel_error=error, tolerance=self.tolerance, coordinates=coords)
                results.append(result)
                if self.verbose and not result.passed:
                    echo(f"⚠️  Gradcheck Agent: {name} relative error {error:.3e} exceeds {self.tolerance:.0e}")
        if self.verbose:
            failed = sum(not r.passed for r in results)
            status = "✅" if not failed else "❌"
            echo(f"{status} Gradcheck Agent: {len(results) - failed}/{len(results)} operations within tolerance")
        return results
