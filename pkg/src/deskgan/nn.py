"""Layers, parameter containers and the three weight initialization schemes."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor, matmul, mean, power, reshape

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

INIT_SCHEMES = ("default_dcgan", "he", "xavier_normalized")
LAYER_KINDS = ("dense", "conv", "conv_transpose", "batchnorm", "dropout")


@dataclass(frozen=True)
class InitSpec:
    scheme: str
    fan_in: int
    fan_out: int

    def __post_init__(self):
        if self.scheme not in INIT_SCHEMES:
            raise ValueError(f"unknown init scheme {self.scheme!r}")
        if self.fan_in < 1 or self.fan_out < 1:
            raise ValueError("fan_in and fan_out must be >= 1")


@dataclass
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    activation: Optional[str] = None
    init: Optional[InitSpec] = None
    p_drop: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if not 0.0 <= self.p_drop < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")

    @property
    def fan_in(self) -> int:
        if self.kind in ("conv", "conv_transpose"):
            return self.in_features * self.kernel * self.kernel
        return max(self.in_features, 1)

    @property
    def fan_out(self) -> int:
        if self.kind in ("conv", "conv_transpose"):
            return self.out_features * self.kernel * self.kernel
        return max(self.out_features, 1)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, val in vars(self).items():
            if isinstance(val, (Tensor, Module)):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in self._children():
            full = f"{prefix}{name}"
            if isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif val.requires_grad:
                yield full, val

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, val in self._children():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{name}.")
        for name, val in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{name}", val

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        for name, p in params.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=p.dtype)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()
        for m_name, m in _named_modules(self):
            for b in getattr(m, "_buffers", {}):
                key = f"{m_name}{b}"
                if key in state:
                    m._buffers[b] = np.asarray(state[key], dtype=np.float32).copy()


def _named_modules(mod: Module, prefix: str = ""):
    yield prefix, mod
    for name, val in mod._children():
        if isinstance(val, Module):
            yield from _named_modules(val, f"{prefix}{name}.")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Dense(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, activation=None,
                 rng: Optional[np.random.Generator] = None):
        self.spec = LayerSpec("dense", in_features, out_features, activation=activation)
        rng = rng or np.random.default_rng(0)
        bound = xavier_bound(in_features, out_features)
        self.weight = parameter(rng.uniform(-bound, bound, (in_features, out_features)))
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
                 bias: bool = True, activation=None, rng: Optional[np.random.Generator] = None):
        self.spec = LayerSpec("conv", in_ch, out_ch, kernel, stride, padding, activation)
        rng = rng or np.random.default_rng(0)
        self.weight = parameter(rng.normal(0.0, 0.02, (out_ch, in_ch, kernel, kernel)))
        self.bias = parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.conv2d(x, self.weight, self.spec.stride, self.spec.padding)
        if self.bias is not None:
            y = y + reshape(self.bias, (1, -1, 1, 1))
        return y


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
                 bias: bool = True, activation=None, rng: Optional[np.random.Generator] = None):
        self.spec = LayerSpec("conv_transpose", in_ch, out_ch, kernel, stride, padding, activation)
        rng = rng or np.random.default_rng(0)
        self.weight = parameter(rng.normal(0.0, 0.02, (in_ch, out_ch, kernel, kernel)))
        self.bias = parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.conv_transpose2d(x, self.weight, self.spec.stride, self.spec.padding)
        if self.bias is not None:
            y = y + reshape(self.bias, (1, -1, 1, 1))
        return y


def batchnorm_forward(x: Tensor, scale: Tensor, shift: Tensor, mode: str = "train",
                      running_mean: Optional[np.ndarray] = None,
                      running_var: Optional[np.ndarray] = None,
                      eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
    """Batch normalization over every axis except the feature axis 1.

    In train mode the running statistics (if given) are updated in place.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2")
        mu = mean(x, axis=axes, keepdims=True)
        d = x - mu
        var = mean(d * d, axis=axes, keepdims=True)
        xhat = d * power(var + eps, -0.5)
        if running_mean is not None:
            n = x.size // x.shape[1]
            unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.data.reshape(-1)
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    elif mode == "eval":
        if running_mean is None or running_var is None:
            raise ValueError("eval mode needs running statistics")
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype).reshape(bshape)
        xhat = (x - running_mean.astype(x.dtype).reshape(bshape)) * inv
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    return xhat * reshape(scale, bshape) + reshape(shift, bshape)


class BatchNorm(Module):
    def __init__(self, num_features: int):
        self.spec = LayerSpec("batchnorm", num_features, num_features)
        self.weight = parameter(np.ones(num_features))
        self.bias = parameter(np.zeros(num_features))
        self._buffers = {"running_mean": np.zeros(num_features, np.float32),
                         "running_var": np.ones(num_features, np.float32)}

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm_forward(x, self.weight, self.bias, "train" if self.training else "eval",
                                 self._buffers["running_mean"], self._buffers["running_var"])


def dropout_forward(x: Tensor, rate: float, mode: str, rng: np.random.Generator) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if mode == "eval" or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    scale = (keep / (1.0 - rate)).astype(x.dtype)
    return x * Tensor(scale, dtype=x.dtype)


class Dropout(Module):
    def __init__(self, rate: float, rng: Optional[np.random.Generator] = None):
        self.spec = LayerSpec("dropout", p_drop=rate)
        self.rate = rate
        self.rng = rng or np.random.default_rng(0)

    def forward(self, x: Tensor) -> Tensor:
        return dropout_forward(x, self.rate, "train" if self.training else "eval", self.rng)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def he_std(fan_in: int) -> float:
    return math.sqrt(2.0 / fan_in)


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0) / math.sqrt(fan_in + fan_out)


def init_default_dcgan(layer: Module, rng: np.random.Generator) -> None:
    """N(0, 0.02) conv weights; batchnorm weights N(1, 0.02) with zero bias."""
    kind = getattr(getattr(layer, "spec", None), "kind", None)
    if kind in ("conv", "conv_transpose"):
        layer.weight.data = rng.normal(0.0, 0.02, layer.weight.shape).astype(np.float32)
    elif kind == "batchnorm":
        layer.weight.data = rng.normal(1.0, 0.02, layer.weight.shape).astype(np.float32)
        layer.bias.data = np.zeros_like(layer.bias.data)
    else:
        raise ValueError(f"default DCGAN init does not cover layer kind {kind!r}")


def init_he(layer: Module, n_l: Optional[int], rng: np.random.Generator) -> None:
    n_l = n_l or layer.spec.fan_in
    if n_l < 1:
        raise ValueError("n_l must be >= 1")
    layer.weight.data = rng.normal(0.0, he_std(n_l), layer.weight.shape).astype(np.float32)
    if getattr(layer, "bias", None) is not None:
        layer.bias.data = np.zeros_like(layer.bias.data)


def init_xavier_normalized(layer: Module, n_l: Optional[int], m_l: Optional[int],
                           rng: np.random.Generator) -> None:
    n_l = n_l or layer.spec.fan_in
    m_l = m_l or layer.spec.fan_out
    if n_l < 1 or m_l < 1:
        raise ValueError("n_l and m_l must be >= 1")
    b = xavier_bound(n_l, m_l)
    layer.weight.data = rng.uniform(-b, b, layer.weight.shape).astype(np.float32)
    if getattr(layer, "bias", None) is not None:
        layer.bias.data = np.zeros_like(layer.bias.data)


def apply_init(layer: Module, spec: InitSpec, rng: np.random.Generator) -> None:
    if spec.scheme == "default_dcgan":
        init_default_dcgan(layer, rng)
    elif spec.scheme == "he":
        init_he(layer, spec.fan_in, rng)
    else:
        init_xavier_normalized(layer, spec.fan_in, spec.fan_out, rng)
