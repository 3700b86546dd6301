"""Differentiable image operations built on `pbeunet.tensor`.

Convolutions are cross-correlations computed through an im2col-style tap
gather followed by a single tensordot (groups=1) or a grouped einsum.
Bilinear resampling uses half-pixel centres with edge clamping
(align_corners=False) and is expressed as two interpolation matrices.
"""
from typing import List, Optional, Sequence

import numpy as np

from pbeunet.errors import NormalizationError, ShapeError
from pbeunet.tensor import Tensor, axis_name, record_flops

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _require_rank(op: str, x: Tensor, rank: int) -> None:
    if x.ndim != rank:
        raise ShapeError(op, "rank", rank, x.ndim)


def conv_output_extent(size: int, kernel: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation of x (N,Cin,H,W) with w (Cout,Cin/groups,kh,kw)."""
    _require_rank("conv2d", x, 4)
    _require_rank("conv2d", w, 4)
    if stride < 1 or dilation < 1 or groups < 1 or pad < 0:
        raise ValueError(f"conv2d: invalid stride={stride} pad={pad} dilation={dilation} groups={groups}")
    n, c_in, h, wd = x.shape
    c_out, c_group, kh, kw = w.shape
    if c_in % groups:
        raise ShapeError("conv2d", "C", f"multiple of groups={groups}", c_in)
    if c_out % groups:
        raise ShapeError("conv2d", "Cout", f"multiple of groups={groups}", c_out)
    if c_group != c_in // groups:
        raise ShapeError("conv2d", "C", c_group * groups, c_in, "input channels do not match the weight")
    if b is not None and b.shape != (c_out,):
        raise ShapeError("conv2d", "bias", (c_out,), b.shape)
    ho = conv_output_extent(h, kh, stride, pad, dilation)
    wo = conv_output_extent(wd, kw, stride, pad, dilation)
    if ho < 1:
        raise ShapeError("conv2d", "H", "output extent >= 1", ho)
    if wo < 1:
        raise ShapeError("conv2d", "W", "output extent >= 1", wo)

    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c_in, kh, kw, ho, wo), dtype=x.dtype)
    h_span = stride * (ho - 1) + 1
    w_span = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            top, left = i * dilation, j * dilation
            cols[:, :, i, j] = padded[:, :, top:top + h_span:stride, left:left + w_span:stride]

    c_per = c_out // groups
    weight = w.data
    if groups == 1:
        out = np.tensordot(weight, cols, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
    else:
        cols_g = cols.reshape(n, groups, c_group, kh, kw, ho, wo)
        w_g = weight.reshape(groups, c_per, c_group, kh, kw)
        out = np.einsum("ngcijhw,gocij->ngohw", cols_g, w_g).reshape(n, c_out, ho, wo)
    out = out.astype(x.dtype, copy=False)
    if b is not None:
        out = out + b.data.reshape(1, c_out, 1, 1)
    record_flops("conv2d", 2 * kh * kw * c_group * c_out * ho * wo * n + (n * c_out * ho * wo if b is not None else 0))

    def backward_fn(g):
        grad_b = g.sum(axis=(0, 2, 3)) if b is not None else None
        if groups == 1:
            grad_w = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
            grad_cols = np.tensordot(weight, g, axes=([0], [1])).transpose(3, 0, 1, 2, 4, 5)
        else:
            g_g = g.reshape(n, groups, c_per, ho, wo)
            cols_g = cols.reshape(n, groups, c_group, kh, kw, ho, wo)
            w_g = weight.reshape(groups, c_per, c_group, kh, kw)
            grad_w = np.einsum("ngohw,ngcijhw->gocij", g_g, cols_g).reshape(weight.shape)
            grad_cols = np.einsum("ngohw,gocij->ngcijhw", g_g, w_g).reshape(n, c_in, kh, kw, ho, wo)
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                top, left = i * dilation, j * dilation
                grad_padded[:, :, top:top + h_span:stride, left:left + w_span:stride] += grad_cols[:, :, i, j]
        grad_x = grad_padded[:, :, pad:pad + h, pad:pad + wd]
        return grad_x, grad_w.astype(weight.dtype, copy=False), grad_b

    inputs = (x, w) if b is None else (x, w, b)
    return Tensor._wrap(out, "conv2d", inputs, backward_fn)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Optional[Tensor],
    running_var: Optional[Tensor],
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization; updates running stats in training mode."""
    _require_rank("batchnorm2d", x, 4)
    if eps < 0:
        raise ValueError(f"batchnorm2d: eps must be non-negative, got {eps}")
    n, c, h, w = x.shape
    for label, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (c,):
            raise ShapeError("batchnorm2d", "C", c, t.shape[0], label)
    shape = (1, c, 1, 1)
    count = n * h * w
    record_flops("batchnorm2d", 2 * x.size)

    if training:
        if count < 2:
            raise NormalizationError("batchnorm2d: training needs at least 2 values per channel (N*H*W = 1)")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if running_mean is not None and running_var is not None:
            running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mean
            running_var.data[...] = (1 - momentum) * running_var.data + momentum * var * count / (count - 1)
    else:
        if running_mean is None or running_var is None:
            raise NormalizationError("batchnorm2d: eval mode requires initialized running statistics")
        if not (np.all(np.isfinite(running_mean.data)) and np.all(np.isfinite(running_var.data))):
            raise NormalizationError("batchnorm2d: running statistics are not initialized")
        mean = running_mean.data
        var = running_var.data

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    x_hat = (x.data - mean.reshape(shape)) * inv_std.reshape(shape)
    gamma_data = gamma.data
    out = gamma_data.reshape(shape) * x_hat + beta.data.reshape(shape)

    def backward_fn(g):
        grad_gamma = (g * x_hat).sum(axis=(0, 2, 3))
        grad_beta = g.sum(axis=(0, 2, 3))
        g_hat = g * gamma_data.reshape(shape)
        if training:
            grad_x = (inv_std.reshape(shape) / count) * (
                count * g_hat
                - g_hat.sum(axis=(0, 2, 3), keepdims=True)
                - x_hat * (g_hat * x_hat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            grad_x = g_hat * inv_std.reshape(shape)
        return grad_x, grad_gamma, grad_beta

    return Tensor._wrap(out.astype(x.dtype, copy=False), "batchnorm2d", (x, gamma, beta), backward_fn)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate (N,Ci,H,W) tensors along the channel axis, in argument order."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_channels", "parts", ">= 1", 0)
    for part in parts:
        _require_rank("concat_channels", part, 4)
    if len(parts) == 1:
        return parts[0]
    first = parts[0]
    for part in parts[1:]:
        for axis in (0, 2, 3):
            if part.shape[axis] != first.shape[axis]:
                raise ShapeError("concat_channels", axis_name(axis, 4), first.shape[axis], part.shape[axis])
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward_fn(g):
        return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(parts)))

    return Tensor._wrap(np.concatenate([p.data for p in parts], axis=1), "concat_channels", parts, backward_fn)


def split_channels(x: Tensor, sizes: Sequence[int]) -> List[Tensor]:
    """Contiguous channel slices of x; sizes must sum to C."""
    _require_rank("split_channels", x, 4)
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes) or sum(sizes) != x.shape[1]:
        raise ShapeError("split_channels", "C", x.shape[1], sum(sizes), f"sizes {sizes}")
    if len(sizes) == 1:
        return [x]
    outputs = []
    start = 0
    for size in sizes:
        lo, hi = start, start + size

        def backward_fn(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            return (full,)

        outputs.append(Tensor._wrap(x.data[:, lo:hi], "split_channels", (x,), backward_fn))
        start = hi
    return outputs


def maxpool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max; ties route the gradient to the first element in row-major order."""
    _require_rank("maxpool2x2", x, 4)
    n, c, h, w = x.shape
    if h % 2:
        raise ShapeError("maxpool2x2", "H", "even", h)
    if w % 2:
        raise ShapeError("maxpool2x2", "W", "even", w)
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    index = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, index, axis=-1)[..., 0]

    def backward_fn(g):
        routed = np.zeros_like(windows)
        np.put_along_axis(routed, index, g[..., None], axis=-1)
        return (routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return Tensor._wrap(out, "maxpool2x2", (x,), backward_fn)


def bilinear_matrix(out_size: int, in_size: int, dtype=np.float64) -> np.ndarray:
    """(out_size, in_size) interpolation weights, half-pixel centres, clamped at the edges."""
    source = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    source = np.clip(source, 0.0, in_size - 1)
    low = np.floor(source).astype(np.int64)
    high = np.minimum(low + 1, in_size - 1)
    frac = source - low
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(matrix, (rows, low), 1.0 - frac)
    np.add.at(matrix, (rows, high), frac)
    return matrix.astype(dtype)


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _require_rank("upsample_bilinear", x, 4)
    if out_h < 1 or out_w < 1:
        raise ShapeError("upsample_bilinear", "H" if out_h < 1 else "W", ">= 1", min(out_h, out_w))
    _, _, h, w = x.shape
    rows = bilinear_matrix(out_h, h, x.dtype)
    cols = bilinear_matrix(out_w, w, x.dtype)
    out = rows @ x.data @ cols.T

    def backward_fn(g):
        return (rows.T @ g @ cols,)

    return Tensor._wrap(out, "upsample_bilinear", (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: (N,C,H,W) -> (N,C,1,1)."""
    _require_rank("global_avg_pool", x, 4)
    h, w = x.shape[2], x.shape[3]
    shape = x.shape

    def backward_fn(g):
        return (np.broadcast_to(g / (h * w), shape).copy(),)

    return Tensor._wrap(x.data.mean(axis=(2, 3), keepdims=True), "global_avg_pool", (x,), backward_fn)


def conv1d_channels(x: Tensor, w: Tensor) -> Tensor:
    """Zero-padded 1-D cross-correlation along the channel axis of x (N,C), shared kernel, no bias."""
    _require_rank("conv1d_channels", x, 2)
    _require_rank("conv1d_channels", w, 1)
    k = w.shape[0]
    if k % 2 == 0:
        raise ShapeError("conv1d_channels", "k", "odd", k)
    n, c = x.shape
    pad = (k - 1) // 2
    padded = np.pad(x.data, ((0, 0), (pad, pad)))
    kernel = w.data
    out = np.zeros_like(x.data)
    for j in range(k):
        out += kernel[j] * padded[:, j:j + c]

    def backward_fn(g):
        grad_w = np.array([(g * padded[:, j:j + c]).sum() for j in range(k)], dtype=kernel.dtype)
        grad_padded = np.zeros_like(padded)
        for j in range(k):
            grad_padded[:, j:j + c] += kernel[j] * g
        return grad_padded[:, pad:pad + c], grad_w

    return Tensor._wrap(out, "conv1d_channels", (x, w), backward_fn)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every channel plane of x (N,C,H,W) by the matching entry of s (N,C)."""
    _require_rank("scale_channels", x, 4)
    n, c = x.shape[:2]
    if s.shape != (n, c):
        raise ShapeError("scale_channels", "C", (n, c), s.shape)
    record_flops("scale_channels", x.size)
    x_data, s_data = x.data, s.data

    def backward_fn(g):
        return g * s_data[:, :, None, None], (g * x_data).sum(axis=(2, 3))

    return Tensor._wrap(x_data * s_data[:, :, None, None], "scale_channels", (x, s), backward_fn)
