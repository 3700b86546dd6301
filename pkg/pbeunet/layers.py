"""Parameterized building blocks and the parameter registry."""
import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from pbeunet import functional as F
from pbeunet.models import BlockKind, BlockSpec
from pbeunet.rng import make_rng
from pbeunet.tensor import Tensor, relu, reshape, sigmoid


class ModuleParams:
    """Ordered registry of named tensors.

    Learnable entries carry gradients; the others are buffers such as
    batch-norm running statistics. `sub` returns a view over one block
    that shares the underlying tensors.
    """

    def __init__(self):
        self._entries: Dict[str, Tuple[Tensor, bool]] = {}

    def add(self, name: str, tensor: Tensor, learnable: bool = True) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = learnable
        tensor.name = name
        self._entries[name] = (tensor, learnable)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name][0]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[Tuple[str, Tensor, bool]]:
        for name, (tensor, learnable) in self._entries.items():
            yield name, tensor, learnable

    def names(self) -> List[str]:
        return list(self._entries)

    def is_learnable(self, name: str) -> bool:
        return self._entries[name][1]

    def sub(self, prefix: str) -> "ModuleParams":
        view = ModuleParams()
        head = prefix + "."
        for name, entry in self._entries.items():
            if name.startswith(head):
                view._entries[name[len(head):]] = entry
        return view

    def merge(self, prefix: str, other: "ModuleParams") -> None:
        for name, tensor, learnable in other:
            self.add(f"{prefix}.{name}", tensor, learnable)

    def learnable(self) -> List[Tuple[str, Tensor]]:
        return [(name, tensor) for name, tensor, learnable in self if learnable]

    def count(self) -> int:
        """Number of learnable scalars."""
        return sum(tensor.size for _, tensor in self.learnable())

    def zero_grad(self) -> None:
        for _, tensor in self.learnable():
            tensor.zero_grad()

    def has_prefix(self, prefix: str) -> bool:
        return any(name.startswith(prefix) for name in self._entries)


def kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def eca_kernel_size(channels: int, gamma: int = 2, b: int = 1) -> int:
    """Adaptive odd kernel size of the channel attention, at least 3."""
    t = int(abs((math.log2(channels) + b) / gamma))
    k = t if t % 2 else t + 1
    return max(k, 3)


_KERNEL = {
    BlockKind.CBR3X3: 3,
    BlockKind.CBR1X1: 1,
    BlockKind.DW3X3: 3,
    BlockKind.DW5X5: 5,
    BlockKind.DW_DILATED: 3,
    BlockKind.CONV1X1: 1,
    BlockKind.CONV3X3: 3,
}


def kernel_size(kind: BlockKind) -> int:
    return _KERNEL[kind]


def _add_cbr(params: ModuleParams, prefix: str, rng: np.random.Generator, c_in: int, c_out: int, k: int) -> None:
    fan_in = c_in * k * k
    params.add(f"{prefix}conv.weight", Tensor(kaiming_uniform(rng, (c_out, c_in, k, k), fan_in)))
    params.add(f"{prefix}bn.gamma", Tensor(np.ones(c_out)))
    params.add(f"{prefix}bn.beta", Tensor(np.zeros(c_out)))
    params.add(f"{prefix}bn.running_mean", Tensor(np.zeros(c_out)), learnable=False)
    params.add(f"{prefix}bn.running_var", Tensor(np.ones(c_out)), learnable=False)


def init_params(spec: BlockSpec, rng_seed: int) -> ModuleParams:
    """Fresh parameters for one block, deterministic in `rng_seed`."""
    rng = make_rng(rng_seed)
    params = ModuleParams()
    kind = spec.kind
    if kind in (BlockKind.CBR3X3, BlockKind.CBR1X1):
        _add_cbr(params, "", rng, spec.in_ch, spec.out_ch, kernel_size(kind))
    elif kind in (BlockKind.DW3X3, BlockKind.DW5X5, BlockKind.DW_DILATED):
        k = kernel_size(kind)
        params.add("weight", Tensor(kaiming_uniform(rng, (spec.out_ch, 1, k, k), k * k)))
        params.add("bias", Tensor(np.zeros(spec.out_ch)))
    elif kind in (BlockKind.CONV1X1, BlockKind.CONV3X3):
        k = kernel_size(kind)
        params.add("weight", Tensor(kaiming_uniform(rng, (spec.out_ch, spec.in_ch, k, k), spec.in_ch * k * k)))
        params.add("bias", Tensor(np.zeros(spec.out_ch)))
    elif kind == BlockKind.ECA:
        k = eca_kernel_size(spec.in_ch)
        params.add("weight", Tensor(kaiming_uniform(rng, (k,), k)))
    elif kind == BlockKind.ENCODER:
        _add_cbr(params, "cbr1.", rng, spec.in_ch, spec.out_ch, 3)
        _add_cbr(params, "cbr2.", rng, spec.out_ch, spec.out_ch, 3)
    elif kind == BlockKind.DECODER:
        _add_cbr(params, "cbr1.", rng, spec.in_ch + spec.skip_ch, spec.out_ch, 3)
        _add_cbr(params, "cbr2.", rng, spec.out_ch, spec.out_ch, 3)
    else:
        raise ValueError(f"unknown block kind {kind}")
    return params


def cbr_forward(x: Tensor, params: ModuleParams, k: int, training: bool) -> Tensor:
    """ReLU(BN(Conv_kxk(x))) with same padding."""
    if k not in (1, 3):
        raise ValueError(f"cbr_forward: k must be 1 or 3, got {k}")
    y = F.conv2d(x, params["conv.weight"], pad=(k - 1) // 2)
    y = F.batchnorm2d(
        y, params["bn.gamma"], params["bn.beta"],
        params["bn.running_mean"], params["bn.running_var"], training,
    )
    return relu(y)


def conv_forward(x: Tensor, params: ModuleParams) -> Tensor:
    """Plain biased convolution with same padding."""
    k = params["weight"].shape[-1]
    return F.conv2d(x, params["weight"], params["bias"], pad=(k - 1) // 2)


def dw_forward(x: Tensor, params: ModuleParams, dilation: int = 1) -> Tensor:
    """Depthwise convolution; pad = dilation * (k - 1) / 2 keeps H and W."""
    w = params["weight"]
    k = w.shape[-1]
    return F.conv2d(x, w, params["bias"], pad=dilation * (k - 1) // 2, dilation=dilation, groups=x.shape[1])


def eca_forward(x: Tensor, params: ModuleParams) -> Tensor:
    n, c = x.shape[:2]
    pooled = reshape(F.global_avg_pool(x), (n, c))
    gate = sigmoid(F.conv1d_channels(pooled, params["weight"]))
    return F.scale_channels(x, gate)


def encoder_block_forward(x: Tensor, params: ModuleParams, training: bool) -> Tensor:
    return cbr_forward(cbr_forward(x, params.sub("cbr1"), 3, training), params.sub("cbr2"), 3, training)


def decoder_block_forward(x: Tensor, skip: Tensor, params: ModuleParams, training: bool) -> Tensor:
    """Upsample to the skip's size, concatenate it, then two CBR3x3."""
    up = F.upsample_bilinear(x, skip.shape[2], skip.shape[3])
    y = F.concat_channels([up, skip])
    return cbr_forward(cbr_forward(y, params.sub("cbr1"), 3, training), params.sub("cbr2"), 3, training)


def block_forward(
    spec: BlockSpec,
    x: Tensor,
    params: ModuleParams,
    training: bool = True,
    skip: Optional[Tensor] = None,
) -> Tensor:
    """Run any block described by a BlockSpec."""
    kind = spec.kind
    if kind in (BlockKind.CBR3X3, BlockKind.CBR1X1):
        return cbr_forward(x, params, kernel_size(kind), training)
    if kind in (BlockKind.DW3X3, BlockKind.DW5X5):
        return dw_forward(x, params)
    if kind == BlockKind.DW_DILATED:
        return dw_forward(x, params, spec.dilation)
    if kind in (BlockKind.CONV1X1, BlockKind.CONV3X3):
        return conv_forward(x, params)
    if kind == BlockKind.ECA:
        return eca_forward(x, params)
    if kind == BlockKind.ENCODER:
        return encoder_block_forward(x, params, training)
    if skip is None:
        raise ValueError("DecoderBlock needs a skip tensor")
    return decoder_block_forward(x, skip, params, training)
