"""Neural-network primitives on top of :mod:`deskgan.tensor`.

Convolutions use a closed family of three bilinear kernels (forward
correlation, its input adjoint, and the weight gradient). Each one's
backward is expressed with the other two, which keeps double backprop
working through conv layers.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _as_tensor, clip, linear_map, log, mean, power, tsum, where_mask

BCE_EPS = 1e-7
GP_LAMBDA = 10.0


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    def _bw(g):
        s = sigmoid(x)
        return (g * (s * (1.0 - s)),)

    data = x.data
    out = np.empty_like(data)
    pos = data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-data[pos]))
    e = np.exp(data[~pos])
    out[~pos] = e / (1.0 + e)
    return Tensor._from_op(out, (x,), _bw, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    def _bw(g):
        t = tanh(x)
        return (g * (1.0 - t * t),)

    return Tensor._from_op(np.tanh(x.data), (x,), _bw, "tanh")


def relu(x: Tensor) -> Tensor:
    return where_mask(x, x.data > 0, 0.0)


def leaky_relu(x: Tensor, a: float = 0.2) -> Tensor:
    if not 0.0 < a < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {a}")
    return where_mask(x, x.data > 0, a)


def activation(kind: str, x: Tensor, a: float = 0.2) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, a)
    if kind in (None, "linear", "none"):
        return x
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _check_same_shape(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")


def mse_loss(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target, pred.dtype)
    _check_same_shape(pred, target)
    d = pred - target
    return mean(d * d)


def bce_loss(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target, pred.dtype)
    _check_same_shape(pred, target)
    if target.data.min() < 0.0 or target.data.max() > 1.0:
        raise ValueError("bce targets must lie in [0, 1]")
    p = clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    return -mean(target * log(p) + (1.0 - target) * log(1.0 - p))


def cce_loss(pred: Tensor, target) -> Tensor:
    """Categorical cross entropy; rows of ``pred`` are class probabilities."""
    target = _as_tensor(target, pred.dtype)
    _check_same_shape(pred, target)
    p = clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    per_row = -tsum(target * log(p), axis=-1)
    return mean(per_row)


def gradient_norms(grads: Tensor) -> Tensor:
    """Per-sample L2 norm of a batch of gradients (first axis is the batch)."""
    flat = grads.reshape(grads.shape[0], -1)
    return power(tsum(flat * flat, axis=1) + 1e-12, 0.5)


def wgan_gp_loss(fake_scores: Tensor, real_scores: Tensor, interp_grads: Tensor,
                 lam: float = GP_LAMBDA) -> Tensor:
    """Critic loss E[D(fake)] - E[D(real)] + lam * E[(||grad D(x_hat)|| - 1)^2]."""
    norms = gradient_norms(interp_grads)
    penalty = mean((norms - 1.0) * (norms - 1.0))
    return mean(fake_scores) - mean(real_scores) + penalty * lam


def loss(kind: str, pred: Tensor, target, aux=None, lam: float = GP_LAMBDA) -> Tensor:
    if kind == "mse":
        return mse_loss(pred, target)
    if kind == "bce":
        return bce_loss(pred, target)
    if kind == "cce":
        return cce_loss(pred, target)
    if kind == "wgan_gp":
        if aux is None:
            raise ValueError("wgan_gp needs the critic gradients at the interpolates")
        return wgan_gp_loss(pred, _as_tensor(target, pred.dtype), aux, lam)
    raise ValueError(f"unknown loss {kind!r}")


# ---------------------------------------------------------------------------
# convolution kernels (numpy)
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    win = _windows(x, w.shape[2], w.shape[3], stride, padding)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,F
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_adj(g: np.ndarray, w: np.ndarray, stride: int, padding: int, h: int, wd: int) -> np.ndarray:
    n, f, ho, wo = g.shape
    _, c, kh, kw = w.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    out = np.zeros((n, c, hp, wp), dtype=np.result_type(g, w))
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0]))  # N,Ho,Wo,C
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out[:, :, padding:padding + h, padding:padding + wd])


def _conv_wgrad(x: np.ndarray, g: np.ndarray, stride: int, padding: int, kh: int, kw: int) -> np.ndarray:
    win = _windows(x, kh, kw, stride, padding)  # N,C,Ho,Wo,kh,kw
    return np.ascontiguousarray(np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))  # F,C,kh,kw


def _conv(x: Tensor, w: Tensor, stride: int, padding: int) -> Tensor:
    h, wd = x.shape[2], x.shape[3]
    kh, kw = w.shape[2], w.shape[3]

    def _bw(g):
        return (_conv_adjoint(g, w, stride, padding, h, wd),
                _conv_weight(x, g, stride, padding, kh, kw))

    return Tensor._from_op(_conv_fwd(x.data, w.data, stride, padding), (x, w), _bw, "conv2d")


def _conv_adjoint(g: Tensor, w: Tensor, stride: int, padding: int, h: int, wd: int) -> Tensor:
    def _bw(u):
        return _conv(u, w, stride, padding), _conv_weight(u, g, stride, padding, w.shape[2], w.shape[3])

    data = _conv_adj(g.data, w.data, stride, padding, h, wd)
    return Tensor._from_op(data, (g, w), _bw, "conv2d_adjoint")


def _conv_weight(x: Tensor, g: Tensor, stride: int, padding: int, kh: int, kw: int) -> Tensor:
    h, wd = x.shape[2], x.shape[3]

    def _bw(v):
        return _conv_adjoint(g, v, stride, padding, h, wd), _conv(x, v, stride, padding)

    data = _conv_wgrad(x.data, g.data, stride, padding, kh, kw)
    return Tensor._from_op(data, (x, g), _bw, "conv2d_weight")


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[N,C,H,W] with k[F,C,kh,kw], zero padding."""
    if x.ndim != 4 or k.ndim != 4:
        raise ValueError("conv2d expects 4-d input and kernel")
    if x.shape[1] != k.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {k.shape[1]}")
    if k.shape[2] > x.shape[2] + 2 * padding or k.shape[3] > x.shape[3] + 2 * padding:
        raise ValueError("kernel larger than padded input")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    return _conv(x, k, stride, padding)


def conv_transpose2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; k has layout [C_in, C_out, kh, kw].

    Output size is (H-1)*stride - 2*padding + kh, i.e. this is exactly the
    adjoint of :func:`conv2d` with the same kernel.
    """
    if x.ndim != 4 or k.ndim != 4:
        raise ValueError("conv_transpose2d expects 4-d input and kernel")
    if x.shape[1] != k.shape[0]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {k.shape[0]}")
    h = (x.shape[2] - 1) * stride - 2 * padding + k.shape[2]
    wd = (x.shape[3] - 1) * stride - 2 * padding + k.shape[3]
    if h < 1 or wd < 1:
        raise ValueError("conv_transpose2d output would be empty")
    return _conv_adjoint(x, k, stride, padding, h, wd)


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------

def _pool_check(x: Tensor, window: int, stride: int) -> None:
    if x.ndim != 4:
        raise ValueError("pooling expects N,C,H,W input")
    if window > x.shape[2] or window > x.shape[3]:
        raise ValueError(f"window {window} larger than input {x.shape[2:]}")
    if stride < 1:
        raise ValueError("stride must be >= 1")


def max_pool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    stride = stride or window
    _pool_check(x, window, stride)
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, window, stride, 0), conv_output_size(w, window, stride, 0)
    win = _windows(x.data, window, window, stride, 0).reshape(n, c, ho, wo, window * window)
    arg = win.argmax(axis=-1)
    di, dj = np.divmod(arg, window)
    rows = np.arange(ho)[None, None, :, None] * stride + di
    cols = np.arange(wo)[None, None, None, :] * stride + dj
    flat = ((np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * h + rows) * w + cols
    flat = flat.ravel()
    src_shape, dtype = x.shape, x.dtype

    def fwd(a):
        return a.reshape(-1)[flat].reshape(n, c, ho, wo)

    def adj(g):
        out = np.zeros(int(np.prod(src_shape)), dtype=dtype)
        np.add.at(out, flat, g.reshape(-1))
        return out.reshape(src_shape)

    return linear_map(x, fwd, adj, "max_pool2d")


def avg_pool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    stride = stride or window
    _pool_check(x, window, stride)
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, window, stride, 0), conv_output_size(w, window, stride, 0)
    scale = 1.0 / (window * window)

    def fwd(a):
        win = _windows(a, window, window, stride, 0)
        return (win.sum(axis=(4, 5), dtype=np.float64) * scale).astype(a.dtype)

    def adj(g):
        out = np.zeros((n, c, h, w), dtype=g.dtype)
        gs = (g * scale).astype(g.dtype)
        for i in range(window):
            for j in range(window):
                out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gs
        return out

    return linear_map(x, fwd, adj, "avg_pool2d")


def pool(kind: str, x: Tensor, window: int, stride: int | None = None) -> Tensor:
    if kind == "max":
        return max_pool2d(x, window, stride)
    if kind == "avg":
        return avg_pool2d(x, window, stride)
    raise ValueError(f"unknown pool kind {kind!r}")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape

    def fwd(a):
        return np.repeat(np.repeat(a, factor, axis=2), factor, axis=3)

    def adj(g):
        return g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5), dtype=np.float64).astype(g.dtype)

    return linear_map(x, fwd, adj, "upsample")


def downsample(x: Tensor, factor: int = 2) -> Tensor:
    """Box-filter downscale by an integer factor."""
    return avg_pool2d(x, factor, factor)


__all__ = [
    "activation", "sigmoid", "tanh", "relu", "leaky_relu", "loss", "mse_loss", "bce_loss",
    "cce_loss", "wgan_gp_loss", "gradient_norms", "conv2d", "conv_transpose2d", "pool",
    "max_pool2d", "avg_pool2d", "upsample_nearest", "downsample", "conv_output_size",
]
