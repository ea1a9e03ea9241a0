"""Forward and gradient kernels for the layers the U-net is built from.

Tensors are plain ``numpy`` arrays in (N, C, H, W) layout. Kernels keep the
dtype of their inputs: the model runs in float32, gradient checks run the very
same code in float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ClassIndexError, DegenerateInputError, DimensionError

DTYPE = np.float32
PROB_FLOOR = 1e-12

Mode = Literal["train", "eval"]


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    """Return ``x`` as a contiguous rank-4 array of ``dtype``."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise DimensionError(f"expected a rank-4 (N, C, H, W) tensor, got shape {arr.shape}")
    return arr


def _check_rank4(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what}: expected rank-4 (N, C, H, W), got shape {x.shape}")


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1 or self.padding < 0:
            raise DimensionError(f"invalid convolution geometry {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise DimensionError(f"invalid channel counts {self}")

    def output_extent(self, n: int) -> int:
        """Spatial extent after a convolution: floor((n - k + 2p) / s) + 1."""
        if n + 2 * self.padding < self.kernel_size:
            raise DimensionError(
                f"spatial extent {n} (padding {self.padding}) is smaller than kernel {self.kernel_size}"
            )
        return (n - self.kernel_size + 2 * self.padding) // self.stride + 1

    def transposed_extent(self, n: int) -> int:
        """Spatial extent after a transposed convolution: (n - 1) * s + k - 2p."""
        m = (n - 1) * self.stride + self.kernel_size - 2 * self.padding
        if n < 1 or m < 1:
            raise DimensionError(f"transposed convolution of extent {n} with {self} is empty")
        return m


# --------------------------------------------------------------------------- im2col


def _im2col(x: np.ndarray, k: int, s: int, p: int) -> tuple[np.ndarray, int, int]:
    """Unfold ``x`` into a (N*Ho*Wo, C*k*k) matrix of receptive fields."""
    n, c, h, w = x.shape
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int, s: int, p: int) -> np.ndarray:
    """Scatter-add the inverse of ``_im2col``; ``cols`` has shape (N, Ho, Wo, C, k, k)."""
    n, c, h, w = shape
    ho, wo = cols.shape[1], cols.shape[2]
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if p:
        out = out[:, :, p : p + h, p : p + w]
    return np.ascontiguousarray(out)


def _nchw(flat: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    return np.ascontiguousarray(flat.reshape(n, h, w, -1).transpose(0, 3, 1, 2))


def _nhwc_flat(x: np.ndarray) -> np.ndarray:
    return x.transpose(0, 2, 3, 1).reshape(-1, x.shape[1])


# --------------------------------------------------------------------------- convolution


def _check_conv(x: np.ndarray, weights: np.ndarray, spec: ConvSpec) -> None:
    _check_rank4(x, "conv2d input")
    expected = (spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size)
    if weights.shape != expected:
        raise DimensionError(f"conv2d weights: expected shape {expected}, got {weights.shape}")
    if x.shape[1] != spec.in_channels:
        raise DimensionError(
            f"conv2d input channel axis: expected {spec.in_channels}, got {x.shape[1]}"
        )
    if x.shape[2] != x.shape[3]:
        raise DimensionError(f"conv2d input height/width axes differ: {x.shape[2]} vs {x.shape[3]}")
    spec.output_extent(x.shape[2])


def conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None, spec: ConvSpec) -> np.ndarray:
    """Zero-padded cross-correlation of ``x`` with ``weights`` (out, in, k, k)."""
    _check_conv(x, weights, spec)
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    cols, ho, wo = _im2col(x, k, s, p)
    out = cols @ weights.reshape(spec.out_channels, -1).T
    if bias is not None:
        if bias.shape != (spec.out_channels,):
            raise DimensionError(f"conv2d bias: expected shape ({spec.out_channels},), got {bias.shape}")
        out += bias
    return _nchw(out, x.shape[0], ho, wo)


def conv2d_grad(
    x: np.ndarray, weights: np.ndarray, spec: ConvSpec, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d with respect to input, weights and bias."""
    _check_conv(x, weights, spec)
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    m = spec.output_extent(x.shape[2])
    expected = (x.shape[0], spec.out_channels, m, m)
    if upstream.shape != expected:
        raise DimensionError(f"conv2d upstream gradient: expected shape {expected}, got {upstream.shape}")
    cols, ho, wo = _im2col(x, k, s, p)
    dy = _nhwc_flat(upstream)
    wmat = weights.reshape(spec.out_channels, -1)
    dw = (dy.T @ cols).reshape(weights.shape)
    db = upstream.sum(axis=(0, 2, 3))
    dcols = (dy @ wmat).reshape(x.shape[0], ho, wo, spec.in_channels, k, k)
    dx = _col2im(dcols, x.shape, k, s, p)
    return dx, dw, db


def _check_deconv(x: np.ndarray, weights: np.ndarray, spec: ConvSpec) -> None:
    _check_rank4(x, "deconv2d input")
    expected = (spec.in_channels, spec.out_channels, spec.kernel_size, spec.kernel_size)
    if weights.shape != expected:
        raise DimensionError(f"deconv2d weights: expected shape {expected}, got {weights.shape}")
    if x.shape[1] != spec.in_channels:
        raise DimensionError(
            f"deconv2d input channel axis: expected {spec.in_channels}, got {x.shape[1]}"
        )
    if x.shape[2] != x.shape[3]:
        raise DimensionError(f"deconv2d input height/width axes differ: {x.shape[2]} vs {x.shape[3]}")
    spec.transposed_extent(x.shape[2])


def deconv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None, spec: ConvSpec) -> np.ndarray:
    """Transposed convolution; ``weights`` has shape (in, out, k, k).

    This is exactly the input-gradient of a conv2d whose weights are ``weights``
    read as (out=in_channels, in=out_channels, k, k) with the same stride/padding.
    """
    _check_deconv(x, weights, spec)
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    n, _, h, w = x.shape
    m = spec.transposed_extent(h)
    cols = (_nhwc_flat(x) @ weights.reshape(spec.in_channels, -1)).reshape(
        n, h, w, spec.out_channels, k, k
    )
    out = _col2im(cols, (n, spec.out_channels, m, m), k, s, p)
    if bias is not None:
        if bias.shape != (spec.out_channels,):
            raise DimensionError(f"deconv2d bias: expected shape ({spec.out_channels},), got {bias.shape}")
        out += bias[None, :, None, None]
    return out


def deconv2d_grad(
    x: np.ndarray, weights: np.ndarray, spec: ConvSpec, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    _check_deconv(x, weights, spec)
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    m = spec.transposed_extent(x.shape[2])
    expected = (x.shape[0], spec.out_channels, m, m)
    if upstream.shape != expected:
        raise DimensionError(
            f"deconv2d upstream gradient: expected shape {expected}, got {upstream.shape}"
        )
    cols, ho, wo = _im2col(upstream, k, s, p)
    wmat = weights.reshape(spec.in_channels, -1)
    dx = _nchw(cols @ wmat.T, x.shape[0], ho, wo)
    dw = (_nhwc_flat(x).T @ cols).reshape(weights.shape)
    db = upstream.sum(axis=(0, 2, 3))
    return dx, dw, db


# --------------------------------------------------------------------------- pooling


@dataclass
class PoolRecord:
    output: np.ndarray
    # flat index into the input's H*W plane for every output element
    argmax: np.ndarray
    input_shape: tuple[int, int, int, int]
    kernel_size: int = 3
    stride: int = 2


def maxpool(x: np.ndarray, k: int = 3, s: int = 2) -> PoolRecord:
    """Max pooling without padding; ties resolve to the lowest flat input index."""
    _check_rank4(x, "maxpool input")
    n, c, h, w = x.shape
    if h < k or w < k:
        raise DimensionError(f"maxpool input extent {h}x{w} is smaller than kernel {k}")
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = win.shape[2], win.shape[3]
    win = win.reshape(n, c, ho, wo, k * k)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * s + local // k
    cols = np.arange(wo)[None, :] * s + local % k
    return PoolRecord(np.ascontiguousarray(out), rows * w + cols, x.shape, k, s)


def maxpool_grad(record: PoolRecord, upstream: np.ndarray) -> np.ndarray:
    """Route each upstream value to its recorded argmax; overlaps accumulate."""
    if upstream.shape != record.output.shape:
        raise DimensionError(
            f"maxpool upstream gradient: expected shape {record.output.shape}, got {upstream.shape}"
        )
    k, s = record.kernel_size, record.stride
    n, c, h, w = record.input_shape
    ho, wo = upstream.shape[2], upstream.shape[3]
    rows = record.argmax // w - np.arange(ho)[:, None] * s
    cols = record.argmax % w - np.arange(wo)[None, :] * s
    local = rows * k + cols
    dx = np.zeros(record.input_shape, dtype=upstream.dtype)
    zero = upstream.dtype.type(0)
    for i in range(k):
        for j in range(k):
            routed = np.where(local == i * k + j, upstream, zero)
            dx[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += routed
    return dx


# --------------------------------------------------------------------------- batch norm


@dataclass
class BatchNormState:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=DTYPE) -> "BatchNormState":
        return cls(
            np.ones(channels, dtype),
            np.zeros(channels, dtype),
            np.zeros(channels, dtype),
            np.ones(channels, dtype),
        )


@dataclass
class BatchNormCache:
    mode: str
    xhat: np.ndarray
    inv_std: np.ndarray
    scale: np.ndarray


def batchnorm(x: np.ndarray, state: BatchNormState, mode: Mode = "train") -> tuple[np.ndarray, BatchNormCache]:
    """Per-channel batch normalisation.

    Train mode uses batch statistics and updates the running estimates in place;
    eval mode uses the running estimates only.
    """
    _check_rank4(x, "batchnorm input")
    c = x.shape[1]
    if state.scale.shape != (c,):
        raise DimensionError(f"batchnorm channel axis: state has {state.scale.shape[0]}, input has {c}")
    dt = x.dtype.type
    if mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count == 0:
            raise DegenerateInputError("batchnorm in train mode needs a non-empty batch")
        mean = x.mean(axis=(0, 2, 3))
        centered = x - mean[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        m = dt(state.momentum)
        unbiased = var * dt(count / (count - 1)) if count > 1 else var
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * unbiased
    elif mode == "eval":
        centered = x - state.running_mean.astype(x.dtype)[None, :, None, None]
        var = state.running_var.astype(x.dtype)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = (1 / np.sqrt(var + dt(state.eps))).astype(x.dtype)
    xhat = centered * inv_std[None, :, None, None]
    scale = state.scale.astype(x.dtype)
    y = xhat * scale[None, :, None, None] + state.shift.astype(x.dtype)[None, :, None, None]
    return y, BatchNormCache(mode, xhat, inv_std, scale)


def batchnorm_grad(cache: BatchNormCache, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients with respect to input, scale and shift."""
    if upstream.shape != cache.xhat.shape:
        raise DimensionError(
            f"batchnorm upstream gradient: expected shape {cache.xhat.shape}, got {upstream.shape}"
        )
    dshift = upstream.sum(axis=(0, 2, 3))
    dscale = (upstream * cache.xhat).sum(axis=(0, 2, 3))
    g = (cache.scale * cache.inv_std)[None, :, None, None]
    if cache.mode == "eval":
        return upstream * g, dscale, dshift
    count = upstream.shape[0] * upstream.shape[2] * upstream.shape[3]
    dt = upstream.dtype.type
    mean_dy = (dshift / dt(count))[None, :, None, None]
    mean_dy_xhat = (dscale / dt(count))[None, :, None, None]
    dx = g * (upstream - mean_dy - cache.xhat * mean_dy_xhat)
    return dx, dscale, dshift


# --------------------------------------------------------------------------- pointwise


def leaky_relu(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return np.where(x > 0, x, x * x.dtype.type(slope))


def leaky_relu_grad(x: np.ndarray, upstream: np.ndarray, slope: float = 0.2) -> np.ndarray:
    # x == 0 takes the negative-branch slope
    return upstream * np.where(x > 0, x.dtype.type(1), x.dtype.type(slope))


def softmax_channels(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_grad(probs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return probs * (upstream - (upstream * probs).sum(axis=1, keepdims=True))


def _check_targets(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    _check_rank4(probs, "class probabilities")
    n, c, h, w = probs.shape
    targets = np.asarray(targets)
    if targets.shape != (n, h, w):
        raise DimensionError(f"targets: expected shape {(n, h, w)}, got {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ClassIndexError(f"target class indices must lie in [0, {c}); got [{targets.min()}, {targets.max()}]")
    return targets.astype(np.intp)


def cross_entropy_loss(probs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of the true class and its gradient w.r.t. ``probs``."""
    targets = _check_targets(probs, targets)
    true_p = np.take_along_axis(probs, targets[:, None], axis=1)
    floored = np.maximum(true_p, probs.dtype.type(PROB_FLOOR))
    count = targets.size
    loss = float(-np.log(floored.astype(np.float64)).sum() / count)
    grad = np.zeros_like(probs)
    live = true_p >= PROB_FLOOR
    np.put_along_axis(grad, targets[:, None], np.where(live, -1 / (floored * count), 0).astype(probs.dtype), axis=1)
    return loss, grad


def softmax_cross_entropy_grad(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of the mean log loss w.r.t. the logits feeding ``softmax_channels``."""
    targets = _check_targets(probs, targets)
    grad = probs.copy()
    onehot = np.take_along_axis(grad, targets[:, None], axis=1) - 1
    np.put_along_axis(grad, targets[:, None], onehot, axis=1)
    return grad / probs.dtype.type(targets.size)


# --------------------------------------------------------------------------- alignment


def align_spatial(x: np.ndarray, extent: int) -> np.ndarray:
    """Zero-pad bottom/right (or crop) so that H = W = ``extent``."""
    h = x.shape[2]
    if h == extent:
        return x
    if h > extent:
        return np.ascontiguousarray(x[:, :, :extent, :extent])
    d = extent - h
    return np.pad(x, ((0, 0), (0, 0), (0, d), (0, d)))


def align_spatial_grad(upstream: np.ndarray, extent: int) -> np.ndarray:
    """Gradient of ``align_spatial`` back to an input of spatial size ``extent``."""
    h = upstream.shape[2]
    if h == extent:
        return upstream
    if h > extent:
        return np.ascontiguousarray(upstream[:, :, :extent, :extent])
    d = extent - h
    return np.pad(upstream, ((0, 0), (0, 0), (0, d), (0, d)))
