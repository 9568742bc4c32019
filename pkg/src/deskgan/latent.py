"""Operations on style vectors of a trained style generator: projection, blending, mixing."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import image_grid, to_uint8
from .optim import Adam
from .style import StyleGenerator, mean_w, render
from .tensor import Tensor, mean

DEFAULT_STEPS = 600
DEFAULT_DIVISIONS = 50
DEFAULT_MIX = 7
RAMPDOWN = 0.25


@dataclass
class ProjectionRun:
    target: np.ndarray
    steps: int
    trace: list = field(default_factory=list)
    w: Optional[np.ndarray] = None
    final_loss: float = float("nan")
    lr: float = 0.1

    def metadata(self) -> dict:
        return {"steps": self.steps, "lr": self.lr, "initial_loss": self.trace[0] if self.trace else None,
                "final_loss": self.final_loss, "loss": "pixel_mse"}


def _lr_at(step: int, steps: int, base: float) -> float:
    """Flat, then a cosine ramp-down over the last quarter of the run."""
    t = step / steps
    ramp = min(1.0, (1.0 - t) / RAMPDOWN)
    return base * (0.5 - 0.5 * math.cos(ramp * math.pi))


def _render_loss(g: StyleGenerator, w: Tensor, target: Tensor) -> Tensor:
    out = g.synthesis(w.reshape(1, *w.shape))
    d = out - target
    return mean(d * d)


def project(target, g: StyleGenerator, steps: int = DEFAULT_STEPS, lr: float = 0.1,
            init_w: Optional[np.ndarray] = None, n_mean: int = 1000, seed: int = 0) -> ProjectionRun:
    """Find a style vector whose render matches ``target`` (C, H, W) in [-1, 1] under pixel MSE.

    All rows start from the mapper's mean w unless ``init_w`` is given and
    are optimized jointly with Adam.
    """
    target = np.asarray(target, dtype=np.float32)
    if target.ndim == 3:
        target = target[None]
    res = g.output_resolution
    expected = (1, g.cfg.image_channels, res, res)
    if target.shape != expected:
        raise ValueError(f"target shape {target.shape[1:]} does not match generator output {expected[1:]}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if init_w is None:
        w0 = np.repeat(mean_w(g, n_mean, seed)[:1], g.num_styles, axis=0)
    else:
        w0 = np.asarray(init_w, dtype=np.float32)
        if w0.shape != (g.num_styles, g.latent_dim):
            raise ValueError(f"init_w must have shape {(g.num_styles, g.latent_dim)}")
    w = Tensor(w0, requires_grad=True)
    tgt = Tensor(target)
    opt = Adam([w], lr, betas=(0.9, 0.999))
    run = ProjectionRun(target[0], steps, lr=lr)
    # generator weights are constants here; gradients flow to w only
    params = g.parameters()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        for step in range(steps):
            opt.set_lr(_lr_at(step, steps, lr))
            opt.zero_grad()
            loss = _render_loss(g, w, tgt)
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(f"projection loss became non-finite at step {step}")
            run.trace.append(value)
            loss.backward()
            opt.step()
        run.final_loss = _render_loss(g, w, tgt).item()
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f
    run.w = w.data.copy()
    return run


def _check_pair(wa: np.ndarray, wb: np.ndarray) -> None:
    if wa.shape != wb.shape:
        raise ValueError(f"style vectors differ in shape: {wa.shape} vs {wb.shape}")


def interpolate(wa, wb, lam: float) -> np.ndarray:
    wa, wb = np.asarray(wa), np.asarray(wb)
    _check_pair(wa, wb)
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    return lam * wb + (1 - lam) * wa


def interpolation_sequence(wa, wb, divisions: int = DEFAULT_DIVISIONS,
                           g: Optional[StyleGenerator] = None) -> list:
    """Frames at lam = i / divisions for i in range(divisions) (the end point itself is excluded).

    Without a generator the interpolated style vectors are returned instead of images.
    """
    if divisions < 1:
        raise ValueError("divisions must be >= 1")
    ws = [interpolate(wa, wb, i / divisions) for i in range(divisions)]
    if g is None:
        return ws
    return [to_uint8(render(g, w))[0] for w in ws]


def average(vectors: Sequence) -> np.ndarray:
    if len(vectors) == 0:
        raise ValueError("need at least one vector")
    arr = np.stack([np.asarray(v) for v in vectors])
    return arr.astype(np.float64).mean(axis=0).astype(arr.dtype)


def style_mix(wa, wb, k: int) -> np.ndarray:
    """Rows [0, k) from ``wb`` (coarse styles), rows [k, num_styles) from ``wa``."""
    wa, wb = np.asarray(wa), np.asarray(wb)
    _check_pair(wa, wb)
    if not 0 <= k <= wa.shape[0]:
        raise ValueError(f"k must lie in [0, {wa.shape[0]}]")
    out = wa.copy()
    out[:k] = wb[:k]
    return out


@dataclass
class MixingGrid:
    tiles: np.ndarray  # n x n x H x W x C uint8
    k: int
    labels: list

    @property
    def image(self) -> np.ndarray:
        n = self.tiles.shape[0]
        return image_grid(self.tiles.reshape(n * n, *self.tiles.shape[2:]), cols=n)

    def sidecar(self) -> dict:
        return {"k": self.k, "rows": self.labels, "cols": self.labels,
                "cell": "render(style_mix(w_row, w_col, k))"}

    def save_sidecar(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.sidecar(), indent=2) + "\n")
        return path


def mixing_grid(sources: Sequence, k: int, g: StyleGenerator, labels: Optional[list] = None) -> MixingGrid:
    ws = [np.asarray(w, dtype=np.float32) for w in sources]
    n = len(ws)
    if n == 0:
        raise ValueError("need at least one source")
    mixed = np.stack([style_mix(ws[i], ws[j], k) for i in range(n) for j in range(n)])
    imgs = to_uint8(render(g, mixed))
    tiles = imgs.reshape(n, n, *imgs.shape[1:])
    return MixingGrid(tiles, k, labels or [f"source{i}" for i in range(n)])
