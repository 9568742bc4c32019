"""Toy Frechet distance over features from a small fixed random conv net."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import checkpoint, ops
from .data import list_images
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

FEATURE_DIM = 64
INPUT_SIZE = 32
EXTRACTOR_SEED = 20220601
EXTRACTOR_FILE = Path(__file__).with_name("toy_extractor.dgck")
MIN_IMAGES = 100
PSD_TOL = 1e-8
_WIDTHS = (3, 16, 32, FEATURE_DIM)


def build_extractor_weights(seed: int = EXTRACTOR_SEED) -> dict:
    """He-scaled random conv weights; this is how the shipped file was generated."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for i, (cin, cout) in enumerate(zip(_WIDTHS[:-1], _WIDTHS[1:])):
        arrays[f"conv{i}.weight"] = rng.normal(0.0, math.sqrt(2.0 / (cin * 9)), (cout, cin, 3, 3))
        arrays[f"conv{i}.bias"] = rng.normal(0.0, 0.1, cout)
    return {k: v.astype(np.float32) for k, v in arrays.items()}


@dataclass(frozen=True)
class Extractor:
    weights: dict
    extractor_id: str

    @property
    def dim(self) -> int:
        return FEATURE_DIM


@lru_cache(maxsize=1)
def load_extractor(path: Optional[str] = None) -> Extractor:
    path = Path(path) if path else EXTRACTOR_FILE
    blob = path.read_bytes()
    digest = hashlib.sha256(blob).hexdigest()[:12]
    return Extractor(checkpoint.loads(blob), f"toyconv-d{FEATURE_DIM}-{digest}")


def _prepare(images) -> np.ndarray:
    """uint8 N x H x W x C (C in {1, 3}) -> float32 N x 3 x 32 x 32 in [-1, 1]."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[..., None]
    if images.dtype != np.uint8:
        raise ValueError("images must be uint8")
    out = np.empty((len(images), INPUT_SIZE, INPUT_SIZE, 3), dtype=np.float32)
    for i, img in enumerate(images):
        if img.shape[-1] == 1:
            img = np.repeat(img, 3, axis=-1)
        if img.shape[:2] != (INPUT_SIZE, INPUT_SIZE):
            img = np.asarray(Image.fromarray(img).resize((INPUT_SIZE, INPUT_SIZE), Image.Resampling.LANCZOS))
        out[i] = img
    return np.moveaxis(out / 127.5 - 1.0, -1, 1)


def extract_features(images, extractor: Optional[Extractor] = None, batch_size: int = 256) -> np.ndarray:
    """Map uint8 images to an n x 64 feature matrix (float64)."""
    extractor = extractor or load_extractor()
    x_all = _prepare(images)
    w = extractor.weights
    feats = []
    with no_grad():
        for s in range(0, len(x_all), batch_size):
            x = Tensor(x_all[s:s + batch_size])
            for i in range(len(_WIDTHS) - 1):
                x = ops.conv2d(x, Tensor(w[f"conv{i}.weight"]), 2, 1)
                x = ops.relu(x + Tensor(w[f"conv{i}.bias"].reshape(1, -1, 1, 1)))
            feats.append(x.data.astype(np.float64).mean(axis=(2, 3)))
    if not feats:
        return np.zeros((0, FEATURE_DIM))
    return np.concatenate(feats)


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int = 0

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        d = self.mu.shape[0]
        if self.sigma.shape != (d, d):
            raise ValueError(f"covariance shape {self.sigma.shape} does not match mean dim {d}")
        if not np.allclose(self.sigma, self.sigma.T, rtol=0, atol=1e-10 * max(1.0, np.abs(self.sigma).max())):
            raise ValueError("covariance is not symmetric")

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "FeatureStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or len(feats) == 0:
            raise ValueError("need a non-empty n x d feature matrix")
        mu = feats.mean(axis=0)
        if len(feats) > 1:
            sigma = np.cov(feats, rowvar=False).reshape(feats.shape[1], feats.shape[1])
        else:
            sigma = np.zeros((feats.shape[1], feats.shape[1]))
        return cls(mu, (sigma + sigma.T) / 2.0, len(feats))


def _check_psd(sigma: np.ndarray, name: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(sigma)
    scale = max(1.0, float(np.abs(vals).max()))
    if vals.min() < -PSD_TOL * scale:
        raise ValueError(f"{name} is not positive semi-definite (min eigenvalue {vals.min():.3e})")
    return vals, vecs


def sqrtm_psd(sigma: np.ndarray) -> np.ndarray:
    """Symmetric square root via eigendecomposition; negative eigenvalues clamp to 0."""
    sigma = np.asarray(sigma, dtype=np.float64)
    vals, vecs = np.linalg.eigh((sigma + sigma.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))."""
    if a.mu.shape != b.mu.shape:
        raise ValueError("feature dimensions differ")
    vals_a, vecs_a = _check_psd(a.sigma, "first covariance")
    _check_psd(b.sigma, "second covariance")
    root_a = (vecs_a * np.sqrt(np.clip(vals_a, 0.0, None))) @ vecs_a.T
    inner = root_a @ b.sigma @ root_a
    eig = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_cross = float(np.sqrt(np.clip(eig, 0.0, None)).sum())
    diff = a.mu - b.mu
    value = float(diff @ diff) + float(np.trace(a.sigma) + np.trace(b.sigma)) - 2.0 * tr_cross
    return max(value, 0.0)


def load_folder(folder) -> np.ndarray:
    arrays = []
    for p in list_images(folder):
        with Image.open(p) as im:
            im = im.convert("RGB")
            if im.size != (INPUT_SIZE, INPUT_SIZE):
                im = im.resize((INPUT_SIZE, INPUT_SIZE), Image.Resampling.LANCZOS)
            arrays.append(np.asarray(im, dtype=np.uint8))
    if not arrays:
        raise ValueError(f"no images found in {folder}")
    return np.stack(arrays)


def fid_report(real_dir, fake_dir, out_path=None, kimg: Optional[float] = None,
               wall_clock_s: Optional[float] = None, extractor: Optional[Extractor] = None) -> dict:
    extractor = extractor or load_extractor()
    real, fake = load_folder(real_dir), load_folder(fake_dir)
    fid = frechet_distance(FeatureStats.from_features(extract_features(real, extractor)),
                           FeatureStats.from_features(extract_features(fake, extractor)))
    warnings = []
    for side, n in (("real", len(real)), ("fake", len(fake))):
        if n < MIN_IMAGES:
            warnings.append(f"only {n} {side} images (< {MIN_IMAGES}); the estimate is noisy")
    report = {"fid": fid, "n_real": len(real), "n_fake": len(fake),
              "extractor_id": extractor.extractor_id, "warnings": warnings}
    if kimg is not None:
        report["kimg"] = kimg
    if wall_clock_s is not None:
        report["wall_clock_s"] = wall_clock_s
    if out_path is not None:
        Path(out_path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
