"""Forward and backward kernels for the primitives the networks are built from.

All functions work on rank-4 ``numpy`` arrays in ``n, c, h, w`` layout and
are pure except for :func:`batchnorm_forward`, which updates the running
statistics record it is handed in train mode.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ParameterError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ParameterError(f"kernel extent must be odd and >= 1, got {self.kernel}")
        if self.stride < 1 or self.dilation < 1 or self.groups < 1 or self.padding < 0:
            raise ParameterError(f"invalid conv geometry {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ParameterError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )

    @property
    def effective_kernel(self) -> int:
        return self.kernel + (self.kernel - 1) * (self.dilation - 1)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        ek = self.effective_kernel
        oh = (h + 2 * self.padding - ek) // self.stride + 1
        ow = (w + 2 * self.padding - ek) // self.stride + 1
        return oh, ow

    @classmethod
    def same(cls, in_channels, out_channels, kernel=3, stride=1, dilation=1, groups=1, has_bias=False):
        """Spec whose padding keeps the spatial size (before striding)."""
        return cls(in_channels, out_channels, kernel, stride, dilation * (kernel - 1) // 2,
                   dilation, groups, has_bias)


@dataclass
class ConvParams:
    weights: np.ndarray
    bias: np.ndarray | None = None


def _conv_geometry(x: np.ndarray, spec: ConvSpec) -> tuple[int, int]:
    if x.ndim != 4:
        raise ShapeError(f"conv input must be rank 4, got rank {x.ndim}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    oh, ow = spec.output_hw(x.shape[2], x.shape[3])
    if oh < 1:
        raise ShapeError(f"non-positive output height {oh} for input height {x.shape[2]}")
    if ow < 1:
        raise ShapeError(f"non-positive output width {ow} for input width {x.shape[3]}")
    return oh, ow


def im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Patch tensor of shape ``(n, c, K, K, oh, ow)`` (a fresh copy)."""
    oh, ow = _conv_geometry(x, spec)
    p, r, s, k = spec.padding, spec.dilation, spec.stride, spec.kernel
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else np.ascontiguousarray(x)
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(x.shape[0], x.shape[1], k, k, oh, ow),
        strides=(sn, sc, r * sh, r * sw, s * sh, s * sw),
        writeable=False,
    )
    return view.copy()


def col2im(dcols: np.ndarray, x_shape, spec: ConvSpec) -> np.ndarray:
    n, c, h, w = x_shape
    p, r, s, k = spec.padding, spec.dilation, spec.stride, spec.kernel
    oh, ow = dcols.shape[4], dcols.shape[5]
    gx = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    for ky in range(k):
        y0 = ky * r
        for kx in range(k):
            x0 = kx * r
            gx[:, :, y0:y0 + s * (oh - 1) + 1:s, x0:x0 + s * (ow - 1) + 1:s] += dcols[:, :, ky, kx]
    return gx[:, :, p:p + h, p:p + w] if p else gx


def conv_forward_cached(x, spec: ConvSpec, weights, bias=None):
    """Lowered convolution; returns ``(out, cols)`` so the backward can reuse the patches."""
    if weights.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weights.shape} does not match spec {spec.weight_shape}")
    cols = im2col(x, spec)
    n, _, k, _, oh, ow = cols.shape
    g = spec.groups
    cg = spec.in_channels // g
    a = cols.reshape(n, g, cg * k * k, oh * ow)
    wm = weights.reshape(g, spec.out_channels // g, cg * k * k)
    out = np.matmul(wm[None], a).reshape(n, spec.out_channels, oh, ow)
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)
    return out, cols


def conv_backward_cached(cols, x_shape, spec: ConvSpec, weights, grad_out, need_x=True):
    n, _, k, _, oh, ow = cols.shape
    g = spec.groups
    cg = spec.in_channels // g
    og = spec.out_channels // g
    a = cols.reshape(n, g, cg * k * k, oh * ow)
    go = grad_out.reshape(n, g, og, oh * ow)
    gw = np.matmul(go, a.transpose(0, 1, 3, 2)).sum(axis=0).reshape(spec.weight_shape)
    gb = grad_out.sum(axis=(0, 2, 3))
    gx = None
    if need_x:
        wm = weights.reshape(g, og, cg * k * k)
        dcols = np.matmul(wm.transpose(0, 2, 1)[None], go).reshape(cols.shape)
        gx = col2im(dcols, x_shape, spec)
    return gx, gw, gb


def conv2d_forward(x: np.ndarray, spec: ConvSpec, params: ConvParams) -> np.ndarray:
    """Grouped, dilated, strided, zero-padded cross-correlation."""
    bias = params.bias if spec.has_bias else None
    return conv_forward_cached(x, spec, params.weights, bias)[0]


def conv2d_backward(x, spec: ConvSpec, params: ConvParams, grad_out):
    """Returns ``(grad_x, grad_weights, grad_bias)``; ``grad_bias`` is None without a bias."""
    oh, ow = _conv_geometry(x, spec)
    expected = (x.shape[0], spec.out_channels, oh, ow)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output {expected}")
    cols = im2col(x, spec)
    gx, gw, gb = conv_backward_cached(cols, x.shape, spec, params.weights, grad_out)
    return gx, gw, (gb if spec.has_bias else None)


def conv2d_direct(x: np.ndarray, spec: ConvSpec, params: ConvParams) -> np.ndarray:
    """Reference convolution by explicit loops; slow, used as an oracle."""
    oh, ow = _conv_geometry(x, spec)
    p, r, s, k, g = spec.padding, spec.dilation, spec.stride, spec.kernel, spec.groups
    cg = spec.in_channels // g
    og = spec.out_channels // g
    n, _, h, w = x.shape
    wts = params.weights
    out = np.zeros((n, spec.out_channels, oh, ow), dtype=np.result_type(x, wts))
    for i in range(n):
        for o in range(spec.out_channels):
            c0 = (o // og) * cg
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ky in range(k):
                        yy = oy * s - p + ky * r
                        if yy < 0 or yy >= h:
                            continue
                        for kx in range(k):
                            xx = ox * s - p + kx * r
                            if xx < 0 or xx >= w:
                                continue
                            acc += np.dot(wts[o, :, ky, kx], x[i, c0:c0 + cg, yy, xx])
                    out[i, o, oy, ox] = acc
    if spec.has_bias and params.bias is not None:
        out += params.bias.reshape(1, -1, 1, 1)
    return out


# -- elementwise and pooling ---------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad):
    return grad * (x > 0)


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y, grad):
    """Backward given the forward *output* ``y``."""
    return grad * y * (1 - y)


def activation(x, kind: str):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ParameterError(f"unknown activation {kind!r}")


def global_avg_pool(x):
    if x.shape[2] * x.shape[3] < 1:
        raise ShapeError(f"global average pooling needs a non-empty plane, got {x.shape[2]}x{x.shape[3]}")
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(x_shape, grad):
    h, w = x_shape[2], x_shape[3]
    return np.broadcast_to(grad / (h * w), x_shape).copy()


def _pool_windows(x, k, s, p, fill):
    n, c, h, w = x.shape
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"pool window {k} too large for {h}x{w}")
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=fill) if p else x
    sn, sc, sh, sw = xp.strides
    win = as_strided(xp, shape=(n, c, oh, ow, k, k), strides=(sn, sc, s * sh, s * sw, sh, sw), writeable=False)
    return win, oh, ow


def max_pool_forward(x, k, s, p=0):
    win, oh, ow = _pool_windows(x, k, s, p, -np.inf)
    flat = win.reshape(*win.shape[:4], k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def max_pool_backward(x_shape, arg, grad, k, s, p=0):
    n, c, h, w = x_shape
    oh, ow = grad.shape[2], grad.shape[3]
    gx = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad.dtype)
    ky, kx = np.divmod(arg, k)
    rows = np.arange(oh)[None, None, :, None] * s + ky
    cols = np.arange(ow)[None, None, None, :] * s + kx
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(gx, (np.broadcast_to(ni, rows.shape), np.broadcast_to(ci, rows.shape), rows, cols), grad)
    return gx[:, :, p:p + h, p:p + w]


def avg_pool_forward(x, k, s, p=0):
    win, _, _ = _pool_windows(x, k, s, p, 0.0)
    return win.mean(axis=(4, 5))


def avg_pool_backward(x_shape, grad, k, s, p=0):
    n, c, h, w = x_shape
    oh, ow = grad.shape[2], grad.shape[3]
    gx = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad.dtype)
    g = grad / (k * k)
    for ky in range(k):
        for kx in range(k):
            gx[:, :, ky:ky + s * (oh - 1) + 1:s, kx:kx + s * (ow - 1) + 1:s] += g
    return gx[:, :, p:p + h, p:p + w]


# -- batch normalization ------------------------------------------------------

@dataclass
class BNStats:
    """Caller-owned running statistics; mutated by train-mode forward passes."""
    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64):
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype))


@dataclass
class BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    train: bool = field(default=True)


def batchnorm_forward(x, gamma, beta, stats: BNStats, mode: str = "train", return_cache=False):
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch-norm affine parameters must have length {c}")
    if mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        unbiased = var * count / (count - 1) if count > 1 else var
        m = stats.momentum
        stats.mean[...] = (1 - m) * stats.mean + m * mean
        stats.var[...] = (1 - m) * stats.var + m * unbiased
    elif mode == "eval":
        mean, var = stats.mean, stats.var
    else:
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    y = gamma.reshape(1, c, 1, 1) * xhat + beta.reshape(1, c, 1, 1)
    y = y.astype(x.dtype, copy=False)
    if return_cache:
        return y, BNCache(xhat, inv_std, gamma, mode == "train")
    return y


def batchnorm_backward(cache: BNCache, grad):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    c = grad.shape[1]
    ggamma = (grad * cache.xhat).sum(axis=(0, 2, 3))
    gbeta = grad.sum(axis=(0, 2, 3))
    scale = (cache.gamma * cache.inv_std).reshape(1, c, 1, 1)
    if not cache.train:
        return grad * scale, ggamma, gbeta
    count = grad.shape[0] * grad.shape[2] * grad.shape[3]
    gx = scale / count * (
        count * grad - gbeta.reshape(1, c, 1, 1) - cache.xhat * ggamma.reshape(1, c, 1, 1)
    )
    return gx.astype(grad.dtype, copy=False), ggamma, gbeta


# -- classification head ------------------------------------------------------

def linear_forward(features, weights, bias=None):
    """``features`` is any array whose leading axis is the batch; it is flattened."""
    f = features.reshape(features.shape[0], -1)
    if f.shape[1] != weights.shape[1]:
        raise ShapeError(f"linear expects {weights.shape[1]} input features, got {f.shape[1]}")
    out = f @ weights.T
    if bias is not None:
        out = out + bias
    return out


def linear_backward(features, weights, grad):
    f = features.reshape(features.shape[0], -1)
    gf = (grad @ weights).reshape(features.shape)
    return gf, grad.T @ f, grad.sum(axis=0)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ParameterError(f"need one label per sample, got {labels.shape} for batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ParameterError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    p = np.exp(z - logsum[:, None])
    p[np.arange(n), labels] -= 1
    return loss, p / n


def linear_and_cross_entropy(features, weights, bias, labels):
    """Loss and gradients ``{"features", "weights", "bias"}`` of a linear softmax head."""
    logits = linear_forward(features, weights, bias)
    loss, glogits = cross_entropy(logits, labels)
    gf, gw, gb = linear_backward(features, weights, glogits)
    return loss, {"features": gf, "weights": gw, "bias": gb}
