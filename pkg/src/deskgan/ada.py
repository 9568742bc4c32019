"""Adaptive discriminator augmentation.

Every augmentation is a differentiable function of the batch, so the same
pipeline can sit in front of the discriminator for generated images. The
geometric ones (flip, quarter turns, circular integer shifts) are pixel
permutations and invert exactly; brightness and saturation invert up to
float rounding (about 1e-6 for inputs in [-1, 1]).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, _as_tensor, linear_map

AUGMENTATIONS = ("hflip", "rot90", "translate", "brightness", "saturation")
MAX_SHIFT = 0.125
BRIGHTNESS = 0.2
SATURATION = (0.5, 2.0)
INVERSE_TOL = 1e-5  # brightness / saturation round trip on [-1, 1] data


@dataclass
class AugmentParams:
    """Per-image draws; a zero / identity entry means the category was not applied."""
    flip: np.ndarray
    rot: np.ndarray
    shift: np.ndarray
    brightness: np.ndarray
    saturation: np.ndarray


def _pixel_perm(h: int, w: int, flip: bool, rot: int, dy: int, dx: int) -> np.ndarray:
    """Flat source index for every output pixel of flip -> rot90^k -> shift."""
    idx = np.arange(h * w).reshape(h, w)
    if flip:
        idx = idx[:, ::-1]
    idx = np.rot90(idx, rot)
    idx = np.roll(idx, (dy, dx), axis=(0, 1))
    return idx.reshape(-1)


def _permute(x: Tensor, perms: np.ndarray) -> Tensor:
    n, c, h, w = x.shape

    def fwd(a):
        flat = a.reshape(n, c, h * w)
        return np.take_along_axis(flat, perms[:, None, :], axis=2).reshape(a.shape)

    def adj(g):
        flat = g.reshape(n, c, h * w)
        out = np.empty_like(flat)
        np.put_along_axis(out, np.broadcast_to(perms[:, None, :], flat.shape), flat, axis=2)
        return out.reshape(g.shape)

    return linear_map(x, fwd, adj, "permute")


def sample_params(n: int, h: int, w: int, p: float, rng: np.random.Generator,
                  enabled: Sequence[str] = AUGMENTATIONS) -> AugmentParams:
    """Draw every category for every image (so the rng stream does not depend on p)."""
    for name in enabled:
        if name not in AUGMENTATIONS:
            raise ValueError(f"unknown augmentation {name!r}")
    on = {name: (rng.random(n) < p) & (name in enabled) for name in AUGMENTATIONS}
    flip = on["hflip"]
    rot = np.where(on["rot90"], rng.integers(1, 4, n), 0)
    max_dy, max_dx = int(MAX_SHIFT * h), int(MAX_SHIFT * w)
    shift = np.stack([rng.integers(-max_dy, max_dy + 1, n), rng.integers(-max_dx, max_dx + 1, n)], 1)
    shift = np.where(on["translate"][:, None], shift, 0)
    bright = np.where(on["brightness"], rng.uniform(-BRIGHTNESS, BRIGHTNESS, n), 0.0)
    log_s = rng.uniform(np.log(SATURATION[0]), np.log(SATURATION[1]), n)
    sat = np.where(on["saturation"], np.exp(log_s), 1.0)
    if h != w:
        rot = np.where(rot % 2 == 1, 0, rot)  # quarter turns need square images
    return AugmentParams(flip.astype(bool), rot.astype(np.int64), shift.astype(np.int64),
                         bright.astype(np.float64), sat.astype(np.float64))


def apply_params(x: Tensor, params: AugmentParams) -> Tensor:
    x = _as_tensor(x)
    n, c, h, w = x.shape
    if params.flip.any() or params.rot.any() or params.shift.any():
        perms = np.stack([_pixel_perm(h, w, bool(params.flip[i]), int(params.rot[i]),
                                      int(params.shift[i, 0]), int(params.shift[i, 1]))
                          for i in range(n)])
        x = _permute(x, perms)
    if params.brightness.any():
        x = x + Tensor(params.brightness.reshape(n, 1, 1, 1), dtype=x.dtype)
    if c > 1 and np.any(params.saturation != 1.0):
        m = x.mean(axis=1, keepdims=True)
        x = m + (x - m) * Tensor(params.saturation.reshape(n, 1, 1, 1), dtype=x.dtype)
    return x


def invert_params(x: Tensor, params: AugmentParams) -> Tensor:
    """Undo :func:`apply_params` (same params)."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    if c > 1 and np.any(params.saturation != 1.0):
        m = x.mean(axis=1, keepdims=True)
        x = m + (x - m) * Tensor((1.0 / params.saturation).reshape(n, 1, 1, 1), dtype=x.dtype)
    if params.brightness.any():
        x = x - Tensor(params.brightness.reshape(n, 1, 1, 1), dtype=x.dtype)
    if params.flip.any() or params.rot.any() or params.shift.any():
        perms = np.stack([_pixel_perm(h, w, bool(params.flip[i]), int(params.rot[i]),
                                      int(params.shift[i, 0]), int(params.shift[i, 1]))
                          for i in range(n)])
        inv = np.argsort(perms, axis=1)
        x = _permute(x, inv)
    return x


def augment(batch, p: float, rng: np.random.Generator, enabled: Sequence[str] = AUGMENTATIONS,
            return_params: bool = False):
    """Apply each enabled augmentation independently with probability ``p`` per image."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    x = _as_tensor(batch)
    n, _, h, w = x.shape
    params = sample_params(n, h, w, p, rng, enabled)
    out = apply_params(x, params) if p > 0 else x
    return (out, params) if return_params else out


# ---------------------------------------------------------------------------
# overfitting heuristic and controller
# ---------------------------------------------------------------------------

def rt_estimate(d_outputs_on_reals) -> float:
    """E[sign(D(real))]."""
    d = np.asarray(d_outputs_on_reals.data if isinstance(d_outputs_on_reals, Tensor)
                   else d_outputs_on_reals, dtype=np.float64)
    if d.size == 0:
        raise ValueError("no discriminator outputs")
    return float(np.mean(np.sign(d)))


P_MAX = 0.999


@dataclass
class AdaState:
    p: float = 0.0
    rt: float = 0.0
    target: float = 0.6
    step: float = 0.005

    def __post_init__(self):
        self.p = float(np.clip(self.p, 0.0, P_MAX))


def adjust_p(state: AdaState, rt: float) -> AdaState:
    if rt > state.target:
        p = state.p + state.step
    elif rt < state.target:
        p = state.p - state.step
    else:
        p = state.p
    return AdaState(float(np.clip(p, 0.0, P_MAX)), float(rt), state.target, state.step)


@dataclass
class AdaController:
    """Accumulates raw r_t per D step, smooths it with an EMA, adjusts p every ``interval`` steps."""
    state: AdaState = field(default_factory=AdaState)
    interval: int = 4
    ema: float = 0.95
    _smoothed: Optional[float] = None
    _steps: int = 0

    @property
    def p(self) -> float:
        return self.state.p

    def observe(self, d_real_outputs) -> bool:
        """Feed one D step's outputs on the reals; returns True when p was adjusted."""
        raw = rt_estimate(d_real_outputs)
        self._smoothed = raw if self._smoothed is None else self.ema * self._smoothed + (1 - self.ema) * raw
        self._steps += 1
        if self._steps % self.interval:
            return False
        self.state = adjust_p(self.state, self._smoothed)
        return True
