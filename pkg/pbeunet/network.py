"""PBE-UNet: U-Net backbone with per-stage boundary detection, boundary-guided
feature enhancement and scale-aware aggregation in the decoder."""
from typing import List, Tuple

import numpy as np

from pbeunet import functional as F
from pbeunet.errors import ShapeError
from pbeunet.layers import (
    ModuleParams,
    cbr_forward,
    conv_forward,
    decoder_block_forward,
    dw_forward,
    eca_forward,
    encoder_block_forward,
    init_params,
)
from pbeunet.models import BgfeExpansion, BlockKind, BlockSpec, FusionMode, PbeConfig, PbeOutput
from pbeunet.rng import named_seed
from pbeunet.tensor import FlopCounter, Tensor, add, mul, no_grad, sigmoid


def decoder_channels(config: PbeConfig) -> List[int]:
    """Decoder stage widths, deep to shallow."""
    return list(reversed(config.stage_channels()))


def bd_specs(channels: int) -> List[Tuple[str, BlockSpec]]:
    return [
        ("cbr", BlockSpec(kind=BlockKind.CBR3X3, in_ch=channels, out_ch=channels)),
        ("conv", BlockSpec(kind=BlockKind.CONV1X1, in_ch=channels, out_ch=1)),
    ]


def bgfe_specs(channels: int, config: PbeConfig) -> List[Tuple[str, BlockSpec]]:
    mode = config.fusion_mode
    if mode == FusionMode.ADD:
        return [("project", BlockSpec(kind=BlockKind.CONV1X1, in_ch=1, out_ch=channels))]
    if mode == FusionMode.MULTIPLY:
        return []
    if mode == FusionMode.CONCAT:
        return [("fuse", BlockSpec(kind=BlockKind.CBR3X3, in_ch=channels + 1, out_ch=channels))]
    specs = [
        ("fuse", BlockSpec(kind=BlockKind.CBR3X3, in_ch=channels + 1, out_ch=channels)),
        ("expand_cbr3", BlockSpec(kind=BlockKind.CBR3X3, in_ch=1, out_ch=channels)),
    ]
    if config.bgfe_expansion != BgfeExpansion.NONE:
        specs.append(("expand_dw3", BlockSpec(kind=BlockKind.DW3X3, in_ch=channels, out_ch=channels)))
    specs.append(("expand_cbr1", BlockSpec(kind=BlockKind.CBR1X1, in_ch=channels, out_ch=channels)))
    if config.bgfe_expansion == BgfeExpansion.DW3_DW5:
        specs.append(("att_dw5", BlockSpec(kind=BlockKind.DW5X5, in_ch=channels, out_ch=channels)))
    specs += [
        ("att_conv", BlockSpec(kind=BlockKind.CONV1X1, in_ch=channels, out_ch=channels)),
        ("residual", BlockSpec(kind=BlockKind.CBR3X3, in_ch=channels, out_ch=channels)),
    ]
    return specs


def saam_specs(channels: int, config: PbeConfig) -> List[Tuple[str, BlockSpec]]:
    reduced = config.saam_channels(channels)
    group = reduced // 4
    specs = [("reduce", BlockSpec(kind=BlockKind.CBR1X1, in_ch=channels, out_ch=reduced))]
    for k, rate in enumerate(config.saam_dilations):
        specs.append((f"dw.{k}", BlockSpec(kind=BlockKind.DW_DILATED, in_ch=group, out_ch=group, dilation=rate)))
    specs += [
        ("merge", BlockSpec(kind=BlockKind.CONV1X1, in_ch=reduced, out_ch=channels)),
        ("refine", BlockSpec(kind=BlockKind.CONV3X3, in_ch=channels, out_ch=channels)),
        ("eca", BlockSpec(kind=BlockKind.ECA, in_ch=channels, out_ch=channels)),
    ]
    return specs


def boundary_blocks(stage: str, channels: int, config: PbeConfig) -> List[Tuple[str, BlockSpec]]:
    """BD and BGFE blocks of one stage, named bd.<stage>.* and bgfe.<stage>.*."""
    blocks = []
    if config.enable_bd:
        blocks += [(f"bd.{stage}.{name}", spec) for name, spec in bd_specs(channels)]
    if config.enable_bgfe:
        blocks += [(f"bgfe.{stage}.{name}", spec) for name, spec in bgfe_specs(channels, config)]
    return blocks


def network_blocks(config: PbeConfig) -> List[Tuple[str, BlockSpec]]:
    """Every parameterized block of the network, in definition order."""
    blocks = []
    in_ch = config.in_channels
    for k, channels in enumerate(config.stage_channels()):
        blocks.append((f"encoder.{k}", BlockSpec(kind=BlockKind.ENCODER, in_ch=in_ch, out_ch=channels)))
        if config.bgfe_stage.in_encoder:
            blocks += boundary_blocks(f"enc.{k}", channels, config)
        in_ch = channels
    blocks.append(("bottleneck", BlockSpec(kind=BlockKind.ENCODER, in_ch=in_ch, out_ch=config.bottleneck_channels)))
    below = config.bottleneck_channels
    for i, channels in enumerate(decoder_channels(config)):
        blocks.append((
            f"decoder.{i}",
            BlockSpec(kind=BlockKind.DECODER, in_ch=below, out_ch=channels, skip_ch=channels),
        ))
        if config.bgfe_stage.in_decoder:
            blocks += boundary_blocks(str(i), channels, config)
        if config.enable_saam:
            blocks += [(f"saam.{i}.{name}", spec) for name, spec in saam_specs(channels, config)]
        below = channels
    blocks.append(("head", BlockSpec(kind=BlockKind.CONV1X1, in_ch=below, out_ch=1)))
    return blocks


def init_network(config: PbeConfig, seed: int) -> ModuleParams:
    """All parameters of the network; each block draws from its own named stream."""
    params = ModuleParams()
    for name, spec in network_blocks(config):
        params.merge(name, init_params(spec, named_seed(seed, name)))
    return params


def bd_forward(features: Tensor, params: ModuleParams, training: bool) -> Tensor:
    """Boundary probability map (N,1,H,W) of one decoder stage."""
    hidden = cbr_forward(features, params.sub("cbr"), 3, training)
    return sigmoid(conv_forward(hidden, params.sub("conv")))


def broadcast_channels(b: Tensor, channels: int) -> Tensor:
    return F.concat_channels([b] * channels)


def bgfe_attention(b: Tensor, params: ModuleParams, config: PbeConfig, training: bool) -> Tensor:
    """Expands a 1-channel boundary map into a C-channel spatial attention map (no squashing)."""
    expanded = cbr_forward(b, params.sub("expand_cbr3"), 3, training)
    if config.bgfe_expansion != BgfeExpansion.NONE:
        expanded = dw_forward(expanded, params.sub("expand_dw3"))
    expanded = cbr_forward(expanded, params.sub("expand_cbr1"), 1, training)
    if config.bgfe_expansion == BgfeExpansion.DW3_DW5:
        expanded = dw_forward(expanded, params.sub("att_dw5"))
    return conv_forward(expanded, params.sub("att_conv"))


def bgfe_forward(
    features: Tensor,
    b: Tensor,
    params: ModuleParams,
    config: PbeConfig,
    training: bool,
) -> Tensor:
    """Fuses stage features with the boundary map according to `config.fusion_mode`."""
    n, c, h, w = features.shape
    if b.shape != (n, 1, h, w):
        raise ShapeError("bgfe_forward", "B", (n, 1, h, w), b.shape, "boundary must match the features spatially")
    mode = config.fusion_mode
    if mode == FusionMode.ADD:
        return add(features, conv_forward(b, params.sub("project")))
    if mode == FusionMode.MULTIPLY:
        return mul(features, broadcast_channels(b, c))
    fused = cbr_forward(F.concat_channels([features, b]), params.sub("fuse"), 3, training)
    if mode == FusionMode.CONCAT:
        return fused
    attention = bgfe_attention(b, params, config, training)
    residual = cbr_forward(features, params.sub("residual"), 3, training)
    return add(mul(attention, fused), residual)


def saam_branches(reduced: Tensor, params: ModuleParams, dilations) -> List[Tensor]:
    """Chained dilated depthwise branches over four equal channel groups."""
    groups = F.split_channels(reduced, [reduced.shape[1] // 4] * 4)
    branches = []
    previous = None
    for k, (group, rate) in enumerate(zip(groups, dilations)):
        source = group if previous is None else add(previous, group)
        previous = dw_forward(source, params.sub(f"dw.{k}"), rate)
        branches.append(previous)
    return branches


def saam_forward(d: Tensor, params: ModuleParams, config: PbeConfig, training: bool) -> Tensor:
    channels = d.shape[1]
    reduced_channels = config.saam_channels(channels)
    if channels * config.saam_reduction != reduced_channels or reduced_channels % 4:
        raise ShapeError("saam_forward", "C", "C*saam_reduction divisible by 4", channels)
    reduced = cbr_forward(d, params.sub("reduce"), 1, training)
    branches = saam_branches(reduced, params, config.saam_dilations)
    merged = conv_forward(F.concat_channels(branches), params.sub("merge"))
    refined = conv_forward(merged, params.sub("refine"))
    return add(eca_forward(refined, params.sub("eca")), d)


def boundary_stage_forward(
    features: Tensor,
    params: ModuleParams,
    stage: str,
    config: PbeConfig,
    training: bool,
    boundary_probs: List[Tensor],
) -> Tensor:
    """Runs BD (and BGFE) of one stage, collecting the boundary map into `boundary_probs`."""
    if not config.enable_bd:
        return features
    b = bd_forward(features, params.sub(f"bd.{stage}"), training)
    boundary_probs.append(b)
    if config.enable_bgfe:
        features = bgfe_forward(features, b, params.sub(f"bgfe.{stage}"), config, training)
    return features


def pbe_forward(image: Tensor, config: PbeConfig, params: ModuleParams, training: bool) -> PbeOutput:
    if image.ndim != 4:
        raise ShapeError("pbe_forward", "rank", 4, image.ndim)
    if image.shape[1] != config.in_channels:
        raise ShapeError("pbe_forward", "C", config.in_channels, image.shape[1])
    for axis, label in ((2, "H"), (3, "W")):
        if image.shape[axis] % 16:
            raise ShapeError("pbe_forward", label, "multiple of 16", image.shape[axis])
    if training and image.shape[0] * (image.shape[2] // 16) * (image.shape[3] // 16) < 2:
        raise ShapeError(
            "pbe_forward", "N", ">= 2 bottleneck values per channel in training", image.shape[0],
            "use a larger batch or an input of at least 32x32",
        )

    skips = []
    encoder_boundary: List[Tensor] = []
    x = image
    for k in range(config.stages):
        features = encoder_block_forward(x, params.sub(f"encoder.{k}"), training)
        if config.bgfe_stage.in_encoder:
            features = boundary_stage_forward(features, params, f"enc.{k}", config, training, encoder_boundary)
        skips.append(features)
        x = F.maxpool2x2(features)
    x = encoder_block_forward(x, params.sub("bottleneck"), training)

    boundary_probs = []
    for i in range(config.stages):
        features = decoder_block_forward(x, skips[-1 - i], params.sub(f"decoder.{i}"), training)
        if config.bgfe_stage.in_decoder:
            features = boundary_stage_forward(features, params, str(i), config, training, boundary_probs)
        if config.enable_saam:
            features = saam_forward(features, params.sub(f"saam.{i}"), config, training)
        x = features

    logits = conv_forward(x, params.sub("head"))
    return PbeOutput(mask_logit_map=logits, mask_prob=sigmoid(logits), boundary_probs=boundary_probs + encoder_boundary)


def count_params_flops(config: PbeConfig, size: int = 256, seed: int = 0) -> Tuple[int, int]:
    """Learnable scalar count and forward FLOPs for one (1, C, size, size) image.

    FLOPs: 2*kh*kw*(Cin/groups)*Cout*H'*W' per convolution plus H'*W'*Cout for
    its bias; batch norm 2 per element; ReLU, sigmoid, elementwise add/mul and
    channel scaling 1 per element. Pooling, resampling and concatenation are free.
    """
    params = init_network(config, seed)
    image = Tensor(np.zeros((1, config.in_channels, size, size)))
    with no_grad(), FlopCounter() as counter:
        pbe_forward(image, config, params, training=False)
    return params.count(), counter.flops
