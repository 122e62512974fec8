"""Network building blocks: linear/norm/conv layers with fused backwards.

Layers are thin parameter holders; the math lives in module-level fused ops
built on the tensor core's ``make_node`` extension point. Every backward here
is hand-derived and pinned by the finite-difference suite.

Layout conventions: activations are batch-first with channels last
([batch, p, p, k] on the grid); the 3-d convolution treats its input as a
single-channel volume [batch, H, W, V] and emits feature maps on a new last
axis.
"""

from __future__ import annotations

import numpy as np

from igmamba import tensor as T
from igmamba.errors import ConfigError, ShapeError
from igmamba.tensor import Tensor, accumulate, make_node


def _uniform_init(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


# -- fused ops ---------------------------------------------------------------


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    k = x.shape[-1]
    if gamma.shape != (k,) or beta.shape != (k,):
        raise ShapeError(f"layer_norm: gamma/beta must be ({k},), got {gamma.shape}/{beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def backward_fn(g):
        lead = tuple(range(g.ndim - 1))
        accumulate(gamma, (g * xhat).sum(axis=lead))
        accumulate(beta, g.sum(axis=lead))
        gxhat = g * gamma.data
        term = gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        accumulate(x, inv * term)

    return make_node(out, (x, gamma, beta), backward_fn, "layer_norm")


def _batch_norm_core(x, gamma, beta, mean, inv, xhat):
    out = gamma.data * xhat + beta.data

    def backward_fn(g):
        lead = tuple(range(g.ndim - 1))
        accumulate(gamma, (g * xhat).sum(axis=lead))
        accumulate(beta, g.sum(axis=lead))
        n = x.data.size // x.data.shape[-1]
        gxhat = g * gamma.data
        term = (
            gxhat
            - gxhat.mean(axis=lead, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=lead, keepdims=True)
        )
        accumulate(x, inv * term)

    return make_node(out, (x, gamma, beta), backward_fn, "batch_norm")


def batch_norm_train(x, gamma, beta, eps=1e-5):
    """Batch statistics over all axes but the last; returns (y, mean, var)."""
    lead = tuple(range(x.ndim - 1))
    mean = x.data.mean(axis=lead, keepdims=True)
    var = x.data.var(axis=lead, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    node = _batch_norm_core(x, gamma, beta, mean, inv, xhat)
    return node, mean.reshape(-1), var.reshape(-1)


def batch_norm_eval(x, gamma, beta, running_mean, running_var, eps=1e-5):
    """Normalize with fixed running statistics (no stats gradient)."""
    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean) * inv
    out = gamma.data * xhat + beta.data

    def backward_fn(g):
        lead = tuple(range(g.ndim - 1))
        accumulate(gamma, (g * xhat).sum(axis=lead))
        accumulate(beta, g.sum(axis=lead))
        accumulate(x, g * gamma.data * inv)

    return make_node(out, (x, gamma, beta), backward_fn, "batch_norm_eval")


def conv3d_same(x, weight, bias):
    """3x3x3 convolution of a single-channel volume with zero same-padding.

    x: [batch, H, W, V] -> [batch, H, W, V, F] with weight [3, 3, 3, F].
    """
    if x.ndim != 4:
        raise ShapeError(f"conv3d_same: x must be [batch, H, W, V], got {x.shape}")
    if weight.ndim != 4 or weight.shape[:3] != (3, 3, 3):
        raise ShapeError(f"conv3d_same: weight must be [3,3,3,F], got {weight.shape}")
    nb, h, w, v = x.shape
    f = weight.shape[-1]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (1, 1)))
    offsets = [(i, j, k) for i in range(3) for j in range(3) for k in range(3)]
    cols = np.stack(
        [xp[:, i : i + h, j : j + w, k : k + v] for i, j, k in offsets], axis=-1
    )  # [batch, H, W, V, 27]
    wflat = weight.data.reshape(27, f)
    out = cols.reshape(-1, 27) @ wflat + bias.data
    out = out.reshape(nb, h, w, v, f)

    def backward_fn(g):
        gflat = g.reshape(-1, f)
        accumulate(weight, (cols.reshape(-1, 27).T @ gflat).reshape(weight.data.shape))
        accumulate(bias, gflat.sum(axis=0))
        gcols = (gflat @ wflat.T).reshape(nb, h, w, v, 27)
        gxp = np.zeros_like(xp)
        for idx, (i, j, k) in enumerate(offsets):
            gxp[:, i : i + h, j : j + w, k : k + v] += gcols[..., idx]
        accumulate(x, gxp[:, 1:-1, 1:-1, 1:-1])

    return make_node(out, (x, weight, bias), backward_fn, "conv3d")


def depthwise_conv2d_same(x, weight, bias):
    """Per-channel 3x3 convolution over the spatial grid with zero same-padding.

    x: [batch, p, p, k] with weight [3, 3, k].
    """
    if x.ndim != 4:
        raise ShapeError(f"depthwise_conv2d_same: x must be [batch, p, p, k], got {x.shape}")
    k = x.shape[-1]
    if weight.shape != (3, 3, k):
        raise ShapeError(f"depthwise_conv2d_same: weight must be [3,3,{k}], got {weight.shape}")
    nb, p, q, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(bias.data, x.shape).copy()
    for i in range(3):
        for j in range(3):
            out += xp[:, i : i + p, j : j + q, :] * weight.data[i, j]

    def backward_fn(g):
        accumulate(bias, g.sum(axis=(0, 1, 2)))
        gw = np.empty_like(weight.data)
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                window = xp[:, i : i + p, j : j + q, :]
                gw[i, j] = (g * window).sum(axis=(0, 1, 2))
                gxp[:, i : i + p, j : j + q, :] += g * weight.data[i, j]
        accumulate(weight, gw)
        accumulate(x, gxp[:, 1:-1, 1:-1, :])

    return make_node(out, (x, weight, bias), backward_fn, "dwconv2d")


def avg_pool2d(x, kernel, stride):
    """Mean over kernel x kernel spatial windows at the given stride."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: x must be [batch, P, P, K], got {x.shape}")
    nb, big, big2, k = x.shape
    if big != big2:
        raise ShapeError(f"avg_pool2d: spatial grid must be square, got {x.shape}")
    if (big - kernel) % stride != 0:
        raise ConfigError(
            f"avg_pool2d: size {big} minus kernel {kernel} not divisible by stride {stride}"
        )
    small = (big - kernel) // stride + 1
    if small < 1:
        raise ConfigError(f"avg_pool2d: kernel {kernel} larger than grid {big}")
    scale = 1.0 / (kernel * kernel)
    out = np.zeros((nb, small, small, k), dtype=x.data.dtype)
    span = stride * (small - 1) + 1
    for i in range(kernel):
        for j in range(kernel):
            out += x.data[:, i : i + span : stride, j : j + span : stride, :]
    out *= scale

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gscaled = g * scale
        for i in range(kernel):
            for j in range(kernel):
                gx[:, i : i + span : stride, j : j + span : stride, :] += gscaled
        accumulate(x, gx)

    return make_node(out, (x,), backward_fn, "avg_pool2d")


# -- layer classes -----------------------------------------------------------


class Linear:
    def __init__(self, din, dout, rng, dtype=np.float32, bias=True):
        self.w = _uniform_init(rng, (din, dout), din, dtype)
        self.b = _uniform_init(rng, (dout,), din, dtype) if bias else None

    def __call__(self, x):
        return T.linear(x, self.w, self.b)

    def named_parameters(self, prefix):
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class LayerNorm:
    def __init__(self, k, dtype=np.float32, eps=1e-5):
        self.gamma = Tensor(np.ones(k, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(k, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)

    def named_parameters(self, prefix):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


class BatchNorm:
    """Channel-wise batchnorm; batch stats in training, running stats at eval.

    Running statistics follow the common momentum-0.1 exponential update with
    the unbiased batch variance, and are persisted as checkpoint buffers.
    """

    def __init__(self, k, dtype=np.float32, eps=1e-5, momentum=0.1):
        self.gamma = Tensor(np.ones(k, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(k, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(k, dtype=dtype)
        self.running_var = np.ones(k, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x, training):
        if not training:
            return batch_norm_eval(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)
        node, mean, var = batch_norm_train(x, self.gamma, self.beta, self.eps)
        n = x.data.size // x.data.shape[-1]
        unbiased = var * (n / (n - 1)) if n > 1 else var
        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(self.running_mean.dtype)
        self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
        return node

    def named_parameters(self, prefix):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


class DepthwiseConv2d:
    def __init__(self, k, rng, dtype=np.float32):
        self.w = _uniform_init(rng, (3, 3, k), 9, dtype)
        self.b = _uniform_init(rng, (k,), 9, dtype)

    def __call__(self, x):
        return depthwise_conv2d_same(x, self.w, self.b)

    def named_parameters(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class Conv3d:
    def __init__(self, feature_maps, rng, dtype=np.float32):
        self.w = _uniform_init(rng, (3, 3, 3, feature_maps), 27, dtype)
        self.b = _uniform_init(rng, (feature_maps,), 27, dtype)

    def __call__(self, x):
        return conv3d_same(x, self.w, self.b)

    def named_parameters(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b
