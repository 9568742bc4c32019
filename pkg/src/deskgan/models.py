"""Generator / discriminator pairs for the introductory GAN and the DCGAN."""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import ops
from .nn import (BatchNorm, Conv2d, ConvTranspose2d, Dense, Dropout, Module, init_default_dcgan,
                 init_he, init_xavier_normalized)
from .tensor import Tensor


class IntroGenerator(Module):
    """Dense projection to a quarter-resolution map, two 2x transposed convs, 7x7 sigmoid conv."""

    output_range = (0.0, 1.0)

    def __init__(self, latent_dim: int = 100, image_size: int = 28, channels: int = 1,
                 width: int = 128, slope: float = 0.2, rng: Optional[np.random.Generator] = None):
        if image_size % 4:
            raise ValueError("intro generator needs an image size divisible by 4")
        rng = rng or np.random.default_rng(0)
        self.latent_dim, self.slope, self.width = latent_dim, slope, width
        self.base = image_size // 4
        self.fc = Dense(latent_dim, width * self.base * self.base, activation="leaky_relu", rng=rng)
        self.up1 = ConvTranspose2d(width, width, 4, 2, 1, activation="leaky_relu", rng=rng)
        self.up2 = ConvTranspose2d(width, width, 4, 2, 1, activation="leaky_relu", rng=rng)
        self.out = Conv2d(width, channels, 7, 1, 3, activation="sigmoid", rng=rng)

    def layers(self) -> list:
        return [self.fc, self.up1, self.up2, self.out]

    def forward(self, z: Tensor) -> Tensor:
        x = ops.leaky_relu(self.fc(z), self.slope)
        x = x.reshape(z.shape[0], self.width, self.base, self.base)
        x = ops.leaky_relu(self.up1(x), self.slope)
        x = ops.leaky_relu(self.up2(x), self.slope)
        return ops.sigmoid(self.out(x))


class IntroDiscriminator(Module):
    def __init__(self, image_size: int = 28, channels: int = 1, width: int = 64, slope: float = 0.2,
                 dropout: float = 0.4, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.slope = slope
        self.conv1 = Conv2d(channels, width, 3, 2, 1, activation="leaky_relu", rng=rng)
        self.drop1 = Dropout(dropout, rng)
        self.conv2 = Conv2d(width, width, 3, 2, 1, activation="leaky_relu", rng=rng)
        self.drop2 = Dropout(dropout, rng)
        side = ops.conv_output_size(ops.conv_output_size(image_size, 3, 2, 1), 3, 2, 1)
        self.fc = Dense(width * side * side, 1, activation="sigmoid", rng=rng)

    def layers(self) -> list:
        return [self.conv1, self.conv2, self.fc]

    def forward(self, x: Tensor) -> Tensor:
        x = self.drop1(ops.leaky_relu(self.conv1(x), self.slope))
        x = self.drop2(ops.leaky_relu(self.conv2(x), self.slope))
        x = x.reshape(x.shape[0], -1)
        return ops.sigmoid(self.fc(x)).reshape(-1)


def _levels(image_size: int) -> int:
    n = int(round(math.log2(image_size)))
    if 2 ** n != image_size or image_size < 8:
        raise ValueError("DCGAN image size must be a power of two >= 8")
    return n - 2


class DCGANGenerator(Module):
    output_range = (-1.0, 1.0)

    def __init__(self, latent_dim: int = 100, image_size: int = 64, channels: int = 3,
                 width: int = 64, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.latent_dim = latent_dim
        n_up = _levels(image_size)
        chans = [width * 2 ** (n_up - 1 - i) for i in range(n_up)]
        self.convs = [ConvTranspose2d(latent_dim, chans[0], 4, 1, 0, bias=False, activation="relu", rng=rng)]
        self.norms = [BatchNorm(chans[0])]
        for a, b in zip(chans[:-1], chans[1:]):
            self.convs.append(ConvTranspose2d(a, b, 4, 2, 1, bias=False, activation="relu", rng=rng))
            self.norms.append(BatchNorm(b))
        self.convs.append(ConvTranspose2d(chans[-1], channels, 4, 2, 1, bias=False, activation="tanh", rng=rng))

    def layers(self) -> list:
        return self.convs + self.norms

    def forward(self, z: Tensor) -> Tensor:
        x = z.reshape(z.shape[0], self.latent_dim, 1, 1)
        for conv, bn in zip(self.convs[:-1], self.norms):
            x = ops.relu(bn(conv(x)))
        return ops.tanh(self.convs[-1](x))


class DCGANDiscriminator(Module):
    def __init__(self, image_size: int = 64, channels: int = 3, width: int = 64, slope: float = 0.2,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.slope = slope
        n_down = _levels(image_size)
        chans = [width * 2 ** i for i in range(n_down)]
        self.convs = [Conv2d(channels, chans[0], 4, 2, 1, bias=False, activation="leaky_relu", rng=rng)]
        self.norms = []
        for a, b in zip(chans[:-1], chans[1:]):
            self.convs.append(Conv2d(a, b, 4, 2, 1, bias=False, activation="leaky_relu", rng=rng))
            self.norms.append(BatchNorm(b))
        self.convs.append(Conv2d(chans[-1], 1, 4, 1, 0, bias=False, activation="sigmoid", rng=rng))

    def layers(self) -> list:
        return self.convs + self.norms

    def forward(self, x: Tensor) -> Tensor:
        x = ops.leaky_relu(self.convs[0](x), self.slope)
        for conv, bn in zip(self.convs[1:-1], self.norms):
            x = ops.leaky_relu(bn(conv(x)), self.slope)
        return ops.sigmoid(self.convs[-1](x)).reshape(-1)


def initialize(model: Module, scheme: str, rng: np.random.Generator) -> None:
    """Apply one of the weight initialization strategies to a whole network.

    ``default``: the DCGAN tutorial scheme for DCGAN models, glorot-uniform
    (normalized Xavier) for the introductory models.
    ``custom``: He-normal for every layer followed by a (leaky) ReLU,
    batchnorm scale 1 / shift 0, normalized Xavier for the output layer.
    """
    layers = model.layers()
    if scheme == "default":
        for layer in layers:
            if isinstance(model, (DCGANGenerator, DCGANDiscriminator)):
                init_default_dcgan(layer, rng)
            elif layer.spec.kind in ("dense", "conv", "conv_transpose"):
                init_xavier_normalized(layer, None, None, rng)
    elif scheme == "custom":
        for layer in layers:
            kind = layer.spec.kind
            if kind == "batchnorm":
                layer.weight.data = np.ones_like(layer.weight.data)
                layer.bias.data = np.zeros_like(layer.bias.data)
            elif layer.spec.activation in ("relu", "leaky_relu"):
                init_he(layer, None, rng)
            else:
                init_xavier_normalized(layer, None, None, rng)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")


def build_pair(config, rng: np.random.Generator):
    if config.model == "intro":
        g = IntroGenerator(config.latent_dim, config.image_size, config.channels, config.g_width,
                           config.leaky_slope, rng)
        d = IntroDiscriminator(config.image_size, config.channels, config.d_width, config.leaky_slope,
                               config.dropout, rng)
    elif config.model == "dcgan":
        g = DCGANGenerator(config.latent_dim, config.image_size, config.channels, config.g_width, rng)
        d = DCGANDiscriminator(config.image_size, config.channels, config.d_width, config.leaky_slope, rng)
    else:
        raise ValueError(f"build_pair does not handle model {config.model!r}")
    initialize(g, config.init, rng)
    initialize(d, config.init, rng)
    return g, d
