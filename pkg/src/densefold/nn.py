"""Forward/backward passes for every layer primitive in the network.

Every forward returns ``(output, cache)`` and the matching backward consumes
that cache. Caches record the shapes they were built from, so feeding a
backward a cache from a different forward call fails with ``ContractError``.
All ops follow the input dtype (float32 training, float64 gradient checks).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, InputError
from .tensor import Rng, check_finite, col2im, conv_output_size, im2col, matmul


def _expect_shape(grad: np.ndarray, shape: tuple, op: str) -> None:
    if grad.shape != shape:
        raise ContractError(f"{op}: gradient shape {grad.shape} does not match cache {shape}")


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvCache:
    cols: np.ndarray
    x_shape: tuple
    weight: np.ndarray
    stride: int
    pad: int
    out_shape: tuple


def conv2d_forward(
    x: np.ndarray, weight: np.ndarray, stride: int = 1, pad: int = 0
) -> tuple[np.ndarray, ConvCache]:
    """Cross-correlate [N,Ci,H,W] with [Co,Ci,kh,kw] filters (no bias)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d needs rank-4 input/weight, got {x.shape}, {weight.shape}")
    n, ci, h, w = x.shape
    co, wci, kh, kw = weight.shape
    if ci != wci:
        raise DimensionError(f"conv2d channel mismatch: input {ci} vs weight {wci}")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    cols = im2col(x, (kh, kw), stride, pad)
    out = matmul(weight.reshape(co, ci * kh * kw), cols)
    out = out.reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    return out, ConvCache(cols, x.shape, weight, stride, pad, out.shape)


def conv2d_backward(cache: ConvCache, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of conv2d_forward w.r.t. input and weight (summed over batch)."""
    _expect_shape(grad_out, cache.out_shape, "conv2d_backward")
    co, ci, kh, kw = cache.weight.shape
    g = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(co, -1)
    grad_w = matmul(g, cache.cols.T).reshape(cache.weight.shape)
    grad_cols = matmul(cache.weight.reshape(co, ci * kh * kw).T, g)
    grad_x = col2im(grad_cols, cache.x_shape, (kh, kw), cache.stride, cache.pad)
    return grad_x, grad_w


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormParams:
    """Per-channel affine parameters plus inference statistics.

    The running buffers are updated in place by train-mode forwards, so they
    may alias entries of a parameter store.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum_bn: float = 0.1


@dataclass
class BnCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mode: str
    in_shape: tuple


def batchnorm_forward(
    x: np.ndarray, params: BatchNormParams, mode: str = "train"
) -> tuple[np.ndarray, BnCache]:
    """Normalize per channel over (N,H,W), then scale/shift by gamma/beta.

    Train mode uses batch statistics and updates the running buffers in
    place; infer mode uses the running buffers and produces an inference-only
    cache that backward rejects.
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm needs rank-4 input, got {x.shape}")
    c = x.shape[1]
    if params.gamma.shape != (c,):
        raise DimensionError(f"batchnorm channel mismatch: input {c} vs gamma {params.gamma.shape}")
    if x.shape[0] == 0:
        raise InputError("batchnorm on an empty batch")
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = params.momentum_bn
        params.running_mean *= 1.0 - m
        params.running_mean += m * mean
        params.running_var *= 1.0 - m
        params.running_var += m * var
    elif mode == "infer":
        mean = params.running_mean
        var = params.running_var
    else:
        raise ConfigError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + params.eps)
    x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = params.gamma[None, :, None, None] * x_hat + params.beta[None, :, None, None]
    cache = BnCache(x_hat.astype(x.dtype, copy=False), inv_std.astype(x.dtype), params.gamma, mode, x.shape)
    return check_finite(out.astype(x.dtype, copy=False), "batchnorm output"), cache


def batchnorm_backward(
    cache: BnCache, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients through normalize-scale-shift, including the
    dependence of batch mean/variance on the input."""
    if cache.mode != "train":
        raise ContractError("batchnorm_backward needs a train-mode cache")
    _expect_shape(grad_out, cache.in_shape, "batchnorm_backward")
    n, _, h, w = grad_out.shape
    m = n * h * w
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * cache.x_hat).sum(axis=(0, 2, 3))
    # d x_hat, then fold in d mean and d var contributions
    g = grad_out * cache.gamma[None, :, None, None]
    g_sum = g.sum(axis=(0, 2, 3))
    gx_sum = (g * cache.x_hat).sum(axis=(0, 2, 3))
    grad_x = (
        cache.inv_std[None, :, None, None]
        / m
        * (m * g - g_sum[None, :, None, None] - cache.x_hat * gx_sum[None, :, None, None])
    )
    return grad_x.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# activations and pooling


@dataclass
class ReluCache:
    positive: np.ndarray
    in_shape: tuple


def relu(x: np.ndarray) -> tuple[np.ndarray, ReluCache]:
    """Elementwise max(0, x)."""
    positive = x > 0
    return np.where(positive, x, x.dtype.type(0)), ReluCache(positive, x.shape)


def relu_backward(cache: ReluCache, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    _expect_shape(grad_out, cache.in_shape, "relu_backward")
    return np.where(cache.positive, grad_out, grad_out.dtype.type(0))


@dataclass
class AvgPoolCache:
    in_shape: tuple
    out_shape: tuple


def avgpool2d(x: np.ndarray) -> tuple[np.ndarray, AvgPoolCache]:
    """Mean over non-overlapping 2x2 windows; halves H and W."""
    if x.ndim != 4:
        raise DimensionError(f"avgpool2d needs rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"avgpool2d needs even spatial dims, got {h}x{w}")
    out = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return out, AvgPoolCache(x.shape, out.shape)


def avgpool2d_backward(cache: AvgPoolCache, grad_out: np.ndarray) -> np.ndarray:
    _expect_shape(grad_out, cache.out_shape, "avgpool2d_backward")
    n, c, h, w = cache.in_shape
    g = grad_out[:, :, :, None, :, None] * grad_out.dtype.type(0.25)
    return np.broadcast_to(g, (n, c, h // 2, 2, w // 2, 2)).reshape(n, c, h, w).copy()


@dataclass
class GapCache:
    in_shape: tuple


def global_avgpool(x: np.ndarray) -> tuple[np.ndarray, GapCache]:
    """Mean over all spatial positions: [N,C,H,W] -> [N,C]."""
    if x.ndim != 4:
        raise DimensionError(f"global_avgpool needs rank-4 input, got {x.shape}")
    return x.mean(axis=(2, 3)), GapCache(x.shape)


def global_avgpool_backward(cache: GapCache, grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = cache.in_shape
    _expect_shape(grad_out, (n, c), "global_avgpool_backward")
    g = grad_out[:, :, None, None] / grad_out.dtype.type(h * w)
    return np.broadcast_to(g, cache.in_shape).copy()


# ---------------------------------------------------------------------------
# dropout


@dataclass
class DropoutCache:
    keep_mask: np.ndarray | None
    scale: float
    in_shape: tuple


def dropout(
    x: np.ndarray, p: float, mode: str = "train", rng: Rng | None = None
) -> tuple[np.ndarray, DropoutCache]:
    """Inverted dropout: zero units with probability p, scale survivors by
    1/(1-p) so inference is a plain identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "infer" or p == 0.0:
        return x, DropoutCache(None, 1.0, x.shape)
    if rng is None:
        raise ConfigError("train-mode dropout with p > 0 needs an rng")
    keep = rng.uniform(0.0, 1.0, size=x.shape) >= p
    scale = 1.0 / (1.0 - p)
    return np.where(keep, x * x.dtype.type(scale), x.dtype.type(0)), DropoutCache(
        keep, scale, x.shape
    )


def dropout_backward(cache: DropoutCache, grad_out: np.ndarray) -> np.ndarray:
    _expect_shape(grad_out, cache.in_shape, "dropout_backward")
    if cache.keep_mask is None:
        return grad_out
    return np.where(cache.keep_mask, grad_out * grad_out.dtype.type(cache.scale), grad_out.dtype.type(0))


# ---------------------------------------------------------------------------
# classifier head


@dataclass
class LinearCache:
    x: np.ndarray
    weight: np.ndarray
    out_shape: tuple


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> tuple[np.ndarray, LinearCache]:
    """Affine map [N,F] @ [F,K] + [K]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"linear needs rank-2 input/weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear feature mismatch: input {x.shape} vs weight {weight.shape}")
    out = matmul(x, weight) + bias
    return out, LinearCache(x, weight, out.shape)


def linear_backward(
    cache: LinearCache, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    _expect_shape(grad_out, cache.out_shape, "linear_backward")
    grad_x = matmul(grad_out, cache.weight.T)
    grad_w = matmul(cache.x.T, grad_out)
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    if z.ndim != 2:
        raise DimensionError(f"softmax needs a rank-2 input, got {z.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of softmax: p * (g - sum(g * p))."""
    _expect_shape(grad_probs, probs.shape, "softmax_backward")
    inner = (grad_probs * probs).sum(axis=1, keepdims=True)
    return probs * (grad_probs - inner)
