"""Toy style-based generator with a progressive WGAN-GP critic.

Mapping network -> per-level AdaIN styles -> constant 4x4 input grown by
2x per level. Two styles are consumed per resolution level, so a 256 px
model has 7 levels and a (14, latent_dim) style vector.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import ops
from .ada import AdaController, AdaState, augment
from .data import image_grid, save_png, to_uint8
from .nn import Module, parameter
from .optim import Adam
from .tensor import Tensor, _as_tensor, grad, mean, no_grad, power, tsum

log = logging.getLogger(__name__)

PIXEL_NORM_EPS = 1e-8
ADAIN_EPS = 1e-8


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def pixel_norm(x: Tensor, eps: float = PIXEL_NORM_EPS) -> Tensor:
    """Divide each pixel's channel vector (axis 1) by its RMS."""
    x = _as_tensor(x)
    ms = mean(x * x, axis=1, keepdims=True)
    return x * power(ms + eps, -0.5)


def adain(x: Tensor, y_s, y_b, eps: float = ADAIN_EPS) -> Tensor:
    """Instance-normalize ``x`` (N, C, H, W) per channel, then scale by y_s and shift by y_b (N, C)."""
    x = _as_tensor(x)
    y_s, y_b = _as_tensor(y_s, x.dtype), _as_tensor(y_b, x.dtype)
    n, c = x.shape[:2]
    if y_s.shape != (n, c) or y_b.shape != (n, c):
        raise ValueError(f"style shapes {y_s.shape}/{y_b.shape} do not match features ({n}, {c})")
    mu = mean(x, axis=(2, 3), keepdims=True)
    d = x - mu
    var = mean(d * d, axis=(2, 3), keepdims=True)
    xhat = d * power(var + eps, -0.5)
    return xhat * y_s.reshape(n, c, 1, 1) + y_b.reshape(n, c, 1, 1)


class EqualizedDense(Module):
    """Weights stored as N(0, 1); multiplied by sqrt(2 / fan_in) on every forward."""

    def __init__(self, in_features: int, out_features: int, bias_init: float = 0.0,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.weight = parameter(rng.standard_normal((in_features, out_features)))
        self.bias = parameter(np.full(out_features, bias_init))
        self.scale = math.sqrt(2.0 / in_features)

    def effective_weight(self) -> np.ndarray:
        return self.weight.data * np.float32(self.scale)

    def forward(self, x: Tensor) -> Tensor:
        return (x @ (self.weight * self.scale)) + self.bias


class EqualizedConv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.weight = parameter(rng.standard_normal((out_ch, in_ch, kernel, kernel)))
        self.bias = parameter(np.zeros(out_ch))
        self.scale = math.sqrt(2.0 / (in_ch * kernel * kernel))
        self.padding = kernel // 2

    def effective_weight(self) -> np.ndarray:
        return self.weight.data * np.float32(self.scale)

    def forward(self, x: Tensor) -> Tensor:
        y = ops.conv2d(x, self.weight * self.scale, 1, self.padding)
        return y + self.bias.reshape(1, -1, 1, 1)


# ---------------------------------------------------------------------------
# configuration and schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StyleConfig:
    resolution: int = 32
    latent_dim: int = 512
    channels: int = 32
    image_channels: int = 3
    mapping_layers: int = 3
    slope: float = 0.2

    def __post_init__(self):
        lv = math.log2(self.resolution)
        if self.resolution < 4 or lv != int(lv):
            raise ValueError("resolution must be a power of two >= 4")
        if self.latent_dim < 1 or self.channels < 1 or self.mapping_layers < 1:
            raise ValueError("latent_dim, channels and mapping_layers must be positive")

    @property
    def levels(self) -> int:
        return int(math.log2(self.resolution)) - 1

    @property
    def num_styles(self) -> int:
        return 2 * self.levels

    def level_resolution(self, level: int) -> int:
        return 4 * 2 ** level


def config_from_train(cfg) -> StyleConfig:
    return StyleConfig(resolution=cfg.image_size, latent_dim=cfg.latent_dim,
                       channels=cfg.style_channels, image_channels=cfg.channels,
                       mapping_layers=cfg.mapping_layers, slope=cfg.leaky_slope)


@dataclass
class ProgressiveSchedule:
    """Stabilize level 0, then alternate fade-in and stabilize phases per added level.

    alpha grows linearly with images shown inside a fade phase.
    """
    levels: int
    images_per_phase: int
    shown: int = 0

    def _phase(self) -> tuple:
        k = self.shown // self.images_per_phase
        if k == 0:
            return 0, 1.0
        level = (k + 1) // 2
        if level >= self.levels:
            return self.levels - 1, 1.0
        if k % 2 == 1:
            frac = (self.shown - k * self.images_per_phase) / self.images_per_phase
            return level, float(frac)
        return level, 1.0

    @property
    def level(self) -> int:
        return self._phase()[0]

    @property
    def alpha(self) -> float:
        return self._phase()[1]

    def advance(self, images: int) -> None:
        self.shown += int(images)


def truncate_z(z: np.ndarray, tau: float, rng: np.random.Generator) -> np.ndarray:
    """Resample every component with |z_i| > tau from N(0, 1) until it lies inside the bound."""
    z = np.array(z, dtype=np.float32, copy=True)
    if math.isinf(tau):
        return z
    if tau <= 0:
        raise ValueError("tau must be > 0")
    bad = np.abs(z) > tau
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum())).astype(np.float32)
        bad = np.abs(z) > tau
    return z


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class MappingNetwork(Module):
    def __init__(self, cfg: StyleConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.layers = [EqualizedDense(cfg.latent_dim, cfg.latent_dim, rng=rng)
                       for _ in range(cfg.mapping_layers)]

    def forward(self, z: Tensor) -> Tensor:
        x = pixel_norm(_as_tensor(z))
        for layer in self.layers:
            x = ops.leaky_relu(layer(x), self.cfg.slope)
        return x


class SynthesisLevel(Module):
    def __init__(self, cfg: StyleConfig, first: bool, rng: np.random.Generator):
        c = cfg.channels
        self.first = first
        self.conv1 = EqualizedConv2d(c, c, 3, rng)
        self.conv2 = EqualizedConv2d(c, c, 3, rng)
        # affine style maps; scale bias starts at 1 so a fresh layer is near identity
        self.style1 = EqualizedDense(cfg.latent_dim, 2 * c, rng=rng)
        self.style2 = EqualizedDense(cfg.latent_dim, 2 * c, rng=rng)
        for s in (self.style1, self.style2):
            s.bias.data[:c] = 1.0
        self.to_rgb = EqualizedConv2d(c, cfg.image_channels, 1, rng)
        self.slope, self.c = cfg.slope, c

    def _styled(self, x, conv, affine, w):
        x = pixel_norm(ops.leaky_relu(conv(x), self.slope))
        st = affine(w)
        return adain(x, st[:, :self.c], st[:, self.c:])

    def forward(self, x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
        if not self.first:
            x = ops.upsample_nearest(x, 2)
        x = self._styled(x, self.conv1, self.style1, w1)
        return self._styled(x, self.conv2, self.style2, w2)


class StyleGenerator(Module):
    output_range = (-1.0, 1.0)

    def __init__(self, cfg: StyleConfig, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.latent_dim = cfg.latent_dim
        self.mapping = MappingNetwork(cfg, rng)
        self.const = parameter(rng.standard_normal((1, cfg.channels, 4, 4)))
        self.levels = [SynthesisLevel(cfg, i == 0, rng) for i in range(cfg.levels)]
        # level / fade reached in training; used when synthesis is called without a level
        self.default_level = cfg.levels - 1
        self.default_alpha = 1.0

    @property
    def output_resolution(self) -> int:
        return self.cfg.level_resolution(self.default_level)

    @property
    def num_styles(self) -> int:
        return self.cfg.num_styles

    def map(self, z) -> Tensor:
        """z (N, latent_dim) -> w (N, num_styles, latent_dim), rows identical."""
        w = self.mapping(_as_tensor(z))
        n = w.shape[0]
        return w.reshape(n, 1, self.latent_dim) + Tensor(np.zeros((1, self.num_styles, 1), np.float32))

    def synthesis(self, w, level: Optional[int] = None, alpha: Optional[float] = None) -> Tensor:
        w = _as_tensor(w)
        if w.ndim == 2:
            w = w.reshape(1, *w.shape)
        if w.shape[1:] != (self.num_styles, self.latent_dim):
            raise ValueError(f"style vector shape {w.shape[1:]} != {(self.num_styles, self.latent_dim)}")
        if level is None:
            level = self.default_level
            alpha = self.default_alpha if alpha is None else alpha
        alpha = 1.0 if alpha is None else alpha
        if not 0 <= level < self.cfg.levels:
            raise ValueError(f"level {level} out of range")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        n = w.shape[0]
        x = self.const + Tensor(np.zeros((n, 1, 1, 1), np.float32))
        prev = None
        for i in range(level + 1):
            if i == level:
                prev = x
            x = self.levels[i](x, w[:, 2 * i], w[:, 2 * i + 1])
        new = ops.tanh(self.levels[level].to_rgb(x))
        if level == 0 or alpha >= 1.0:
            return new
        old = ops.upsample_nearest(ops.tanh(self.levels[level - 1].to_rgb(prev)), 2)
        if alpha <= 0.0:
            return old
        return new * alpha + old * (1.0 - alpha)

    def forward(self, z, level: Optional[int] = None, alpha: Optional[float] = None) -> Tensor:
        return self.synthesis(self.map(z), level, alpha)


def progressive_forward(g: StyleGenerator, z_or_w, schedule: Optional[ProgressiveSchedule] = None,
                        level: Optional[int] = None, alpha: Optional[float] = None,
                        is_w: bool = False) -> Tensor:
    """Render at the schedule's level; old and new paths are blended after their tanh.

    ``z_or_w`` is a batch of z (N, latent_dim) unless ``is_w`` is set, in which
    case it is one or more style vectors.
    """
    if schedule is not None:
        level = schedule.level if level is None else level
        alpha = schedule.alpha if alpha is None else alpha
    alpha = 1.0 if alpha is None else alpha
    x = _as_tensor(z_or_w)
    return g.synthesis(x if is_w else g.map(x), level, alpha)


def map_latent(z, g: StyleGenerator) -> np.ndarray:
    """Single z (latent_dim,) -> StyleVector (num_styles, latent_dim)."""
    z = np.asarray(z, dtype=np.float32)
    if not np.all(np.isfinite(z)):
        raise ValueError("z must be finite")
    with no_grad():
        return g.map(Tensor(z.reshape(1, -1))).data[0]


def render(g: StyleGenerator, w) -> np.ndarray:
    """Style vector(s) -> images (N, C, H, W) in [-1, 1]."""
    with no_grad():
        return g.synthesis(_as_tensor(np.asarray(w, dtype=np.float32))).data


def mean_w(g: StyleGenerator, n: int = 1000, seed: int = 0) -> np.ndarray:
    z = np.random.default_rng(seed).standard_normal((n, g.latent_dim)).astype(np.float32)
    with no_grad():
        return g.map(Tensor(z)).data.mean(axis=0)


class StyleCritic(Module):
    """Progressive critic: fromRGB per level, two convs + 2x box downsample per level."""

    def __init__(self, cfg: StyleConfig, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        c = cfg.channels
        self.cfg = cfg
        self.from_rgb = [EqualizedConv2d(cfg.image_channels, c, 1, rng) for _ in range(cfg.levels)]
        self.conv_a, self.conv_b = [], []
        for _ in range(cfg.levels):
            self.conv_a.append(EqualizedConv2d(c, c, 3, rng))
            self.conv_b.append(EqualizedConv2d(c, c, 3, rng))
        self.fc = EqualizedDense(c * 16, c, rng=rng)
        self.out = EqualizedDense(c, 1, rng=rng)

    def _act(self, x):
        return ops.leaky_relu(x, self.cfg.slope)

    def _block(self, i: int, x: Tensor) -> Tensor:
        x = self._act(self.conv_b[i](self._act(self.conv_a[i](x))))
        return ops.downsample(x, 2) if i > 0 else x

    def forward(self, img: Tensor, level: Optional[int] = None, alpha: float = 1.0) -> Tensor:
        level = self.cfg.levels - 1 if level is None else level
        img = _as_tensor(img)
        x = self._block(level, self._act(self.from_rgb[level](img)))
        if level > 0 and alpha < 1.0:
            skip = self._act(self.from_rgb[level - 1](ops.downsample(img, 2)))
            x = x * alpha + skip * (1.0 - alpha)
        for i in range(level - 1, -1, -1):
            x = self._block(i, x)
        x = self._act(self.fc(x.reshape(x.shape[0], -1)))
        return self.out(x).reshape(-1)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _critic_loss(d: StyleCritic, real: Tensor, fake: Tensor, level: int, alpha: float,
                 lam: float, drift: float, rng: np.random.Generator):
    n = real.shape[0]
    eps = Tensor(rng.random((n, 1, 1, 1)).astype(np.float32))
    x_hat = (real * eps + fake * (1.0 - eps)).detach().requires_grad_()
    d_hat = d(x_hat, level, alpha)
    (g_hat,) = grad(tsum(d_hat), [x_hat], create_graph=True)
    d_real = d(real, level, alpha)
    d_fake = d(fake, level, alpha)
    loss = ops.wgan_gp_loss(d_fake, d_real, g_hat, lam) + mean(d_real * d_real) * drift
    return loss, d_real


def train_style(config, dataset, outdir=None):
    """WGAN-GP training of the style model with progressive growing and ADA."""
    from .train import (LossHistory, TrainingDiverged, TrainResult, batches_per_epoch,
                        prepare_images, save_network)

    images = prepare_images(config, dataset)
    rng = np.random.default_rng(config.seed)
    scfg = config_from_train(config)
    g, d = StyleGenerator(scfg, rng), StyleCritic(scfg, rng)
    betas = (config.beta1, config.beta2)
    opt_g = Adam(g.parameters(), config.lr, betas, config.eps)
    opt_d = Adam(d.parameters(), config.lr, betas, config.eps)
    ada = AdaController(AdaState(0.0, 0.0, config.ada_target, config.ada_step),
                        config.ada_interval, config.ada_ema)
    schedule = ProgressiveSchedule(scfg.levels, max(1, int(config.kimg_per_phase * 1000)))
    grid_z = np.random.default_rng(config.seed + 1).standard_normal(
        (config.grid_size, config.latent_dim)).astype(np.float32)
    outdir = Path(outdir) if outdir is not None else None
    history, grids = LossHistory(), {}
    n, bs = len(images), config.batch_size
    t0 = time.perf_counter()
    it = 0

    def aug(x):
        return augment(x, ada.p, rng) if config.ada_enabled else x

    for epoch in range(1, config.epochs + 1):
        for _ in range(batches_per_epoch(n, bs)):
            it += 1
            level, alpha = schedule.level, schedule.alpha
            factor = scfg.resolution // scfg.level_resolution(level)
            idx = rng.choice(n, size=bs, replace=n < bs)
            real = Tensor(images[idx])
            if factor > 1:
                real = ops.downsample(real, factor)
            z = rng.standard_normal((bs, config.latent_dim)).astype(np.float32)
            with no_grad():
                fake = g(Tensor(z), level, alpha)
            opt_d.zero_grad()
            d_loss_t, d_real = _critic_loss(d, aug(real), aug(fake), level, alpha,
                                            config.gp_lambda, config.drift, rng)
            d_loss_t.backward()
            d_loss = d_loss_t.item()
            if not np.isfinite(d_loss):
                raise TrainingDiverged(f"d_loss became non-finite at iteration {it}")
            opt_d.step()
            if config.ada_enabled and ada.observe(d_real):
                history.record_ada(it, ada.p, ada.state.rt)

            opt_g.zero_grad()
            z = rng.standard_normal((bs, config.latent_dim)).astype(np.float32)
            g_loss_t = -mean(d(aug(g(Tensor(z), level, alpha)), level, alpha))
            g_loss_t.backward()
            g_loss = g_loss_t.item()
            if not np.isfinite(g_loss):
                raise TrainingDiverged(f"g_loss became non-finite at iteration {it}")
            opt_g.step()
            d.zero_grad()
            history.append(it, g_loss, d_loss)
            schedule.advance(bs)
        log.info("epoch %d/%d level %d alpha %.2f g_loss=%.4f d_loss=%.4f p=%.3f",
                 epoch, config.epochs, schedule.level, schedule.alpha, g_loss, d_loss, ada.p)
        if epoch % config.grid_every == 0 or epoch == config.epochs:
            with no_grad():
                out = g(Tensor(grid_z), schedule.level, schedule.alpha).data
            grids[epoch] = image_grid(to_uint8(out))
            if outdir is not None:
                save_png(outdir / "grids" / f"epoch-{epoch:04d}.png", grids[epoch])
        if outdir is not None:
            save_network(outdir / "checkpoints" / f"epoch-{epoch:04d}.dgck", g, d, config,
                         {"level": schedule.level, "alpha": schedule.alpha})
    g.default_level, g.default_alpha = schedule.level, schedule.alpha
    extra = {"kimg": schedule.shown / 1000.0, "wall_clock_s": time.perf_counter() - t0,
             "ada_p": ada.p, "level": schedule.level, "alpha": schedule.alpha}
    if outdir is not None:
        history.to_csv(outdir / "loss.csv")
        save_network(outdir / "network.dgck", g, d, config,
                     {"level": schedule.level, "alpha": schedule.alpha, "kimg": extra["kimg"]})
    return TrainResult(g, d, history, grids, outdir, extra)
