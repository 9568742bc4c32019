"""Dataset preparation, per-channel statistics and normalization."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

RESAMPLE_FILTER = "LANCZOS"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp", ".tif", ".tiff"}


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray
    source: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"{self.id}: expected H x W x 3 pixels, got {self.pixels.shape}")
        if self.pixels.shape[0] == 0 or self.pixels.shape[1] == 0:
            raise ValueError(f"{self.id}: empty image")


@dataclass
class ChannelStats:
    mean: tuple
    std: tuple
    degenerate: bool = field(default=False)

    def as_dict(self) -> dict:
        return {"mean": [float(m) for m in self.mean], "std": [float(s) for s in self.std]}

    @classmethod
    def half(cls, channels: int = 3) -> "ChannelStats":
        return cls((0.5,) * channels, (0.5,) * channels)


def _as_batches(dataset, batch_size: int) -> Iterable[np.ndarray]:
    if isinstance(dataset, np.ndarray):
        for i in range(0, len(dataset), batch_size):
            yield dataset[i:i + batch_size]
        return
    batch = []
    for img in dataset:
        batch.append(np.asarray(img))
        if len(batch) == batch_size:
            yield np.stack(batch)
            batch = []
    if batch:
        yield np.stack(batch)


def channel_stats(dataset, batch_size: int = 64) -> ChannelStats:
    """Per-channel mean and std of uint8 N x H x W x C images scaled to [0, 1].

    One pass over batches; the mean is the average of per-batch channel
    means and std = sqrt(E[X^2] - E[X]^2) from the same batch averages, so
    a ragged final batch is weighted like a full one.
    """
    sums, sq_sums, batches = 0.0, 0.0, 0
    for batch in _as_batches(dataset, batch_size):
        x = batch.astype(np.float64) / 255.0
        if x.ndim == 3:
            x = x[..., None]
        sums = sums + x.mean(axis=(0, 1, 2))
        sq_sums = sq_sums + (x * x).mean(axis=(0, 1, 2))
        batches += 1
    if batches == 0:
        raise ValueError("cannot compute statistics of an empty dataset")
    mean = sums / batches
    var = np.maximum(sq_sums / batches - mean ** 2, 0.0)
    std = np.sqrt(var)
    degenerate = bool(np.any(std < 1e-12))
    if degenerate:
        log.warning("dataset has a constant channel; std is zero")
    return ChannelStats(tuple(float(m) for m in mean), tuple(float(s) for s in std), degenerate)


def normalize(img: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """uint8 H x W x C (or N x H x W x C) -> float32 C x H x W with (x/255 - mean)/std."""
    std = np.asarray(stats.std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError("cannot normalize with a zero standard deviation")
    x = np.asarray(img, dtype=np.float64) / 255.0
    if x.ndim == 2:
        x = x[..., None]
    x = (x - np.asarray(stats.mean)) / std
    return np.moveaxis(x, -1, -3).astype(np.float32)


def denormalize(x: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """Inverse of :func:`normalize`, returning float pixel values in H x W x C layout."""
    x = np.moveaxis(np.asarray(x, dtype=np.float64), -3, -1)
    return (x * np.asarray(stats.std) + np.asarray(stats.mean)) * 255.0


def to_uint8(x: np.ndarray, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    """Map generator output in [low, high] (C x H x W or N x C x H x W) to uint8 HWC."""
    x = np.asarray(x, dtype=np.float64)
    if low == -1.0 and high == 1.0:
        y = x * 127.5 + 128.0
    else:
        y = (x - low) / (high - low) * 255.0
    y = np.clip(np.floor(y) if low == -1.0 else np.rint(y), 0, 255).astype(np.uint8)
    return np.moveaxis(y, -3, -1)


def save_png(path, pixels: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[..., 0]
    Image.fromarray(pixels).save(path, format="png")
    return path


def image_grid(images: np.ndarray, cols: Optional[int] = None) -> np.ndarray:
    """Tile N x H x W x C uint8 images into one image."""
    n, h, w, c = images.shape
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    out = np.zeros((rows * h, cols * w, c), dtype=np.uint8)
    for i in range(n):
        r, q = divmod(i, cols)
        out[r * h:(r + 1) * h, q * w:(q + 1) * w] = images[i]
    return out


def list_images(folder) -> list:
    folder = Path(folder)
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_images(folder, channels: int = 3, size: Optional[int] = None) -> np.ndarray:
    """Load every image in ``folder`` as a uint8 N x H x W x C array (sorted by name)."""
    arrays = []
    for p in list_images(folder):
        with Image.open(p) as im:
            im = im.convert("L" if channels == 1 else "RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.Resampling.LANCZOS)
            a = np.asarray(im, dtype=np.uint8)
        arrays.append(a[..., None] if channels == 1 else a)
    if not arrays:
        return np.zeros((0, size or 0, size or 0, channels), dtype=np.uint8)
    return np.stack(arrays)


def _to_rgb(im: Image.Image) -> Image.Image:
    if im.mode == "RGB":
        return im
    if im.mode in ("RGBA", "LA", "P"):
        im = im.convert("RGBA")
        bg = Image.new("RGBA", im.size, (0, 0, 0, 255))
        return Image.alpha_composite(bg, im).convert("RGB")
    return im.convert("RGB")


def prepare_dataset(src_dir, dest_dir, width: int, height: int) -> int:
    """Resize every readable image in ``src_dir`` to width x height RGB PNG in ``dest_dir``."""
    src_dir, dest_dir = Path(src_dir), Path(dest_dir)
    if not src_dir.is_dir():
        raise FileNotFoundError(f"source directory {src_dir} does not exist")
    if width < 1 or height < 1:
        raise ValueError("width and height must be positive")
    dest_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(dest_dir, os.W_OK):
        raise PermissionError(f"destination {dest_dir} is not writable")
    count = 0
    for p in sorted(src_dir.iterdir()):
        if not p.is_file():
            continue
        try:
            with Image.open(p) as im:
                im.load()
                rgb = _to_rgb(im)
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping unreadable file %s: %s", p.name, exc)
            continue
        rgb = rgb.resize((width, height), Image.Resampling.LANCZOS)
        rgb.save(dest_dir / f"{p.stem}.png", format="png")
        count += 1
    return count


def write_metadata(dest_dir, width: int, height: int, count: int,
                   stats: Optional[ChannelStats]) -> Path:
    meta = {
        "width": width,
        "height": height,
        "count": count,
        "stats": stats.as_dict() if stats is not None else None,
        "filter": RESAMPLE_FILTER,
    }
    path = Path(dest_dir) / "dataset.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def normalize_batch(images: np.ndarray, mode: str, stats: Optional[ChannelStats] = None) -> np.ndarray:
    """Normalize uint8 N x H x W x C images to float32 N x C x H x W."""
    if mode == "unit":
        return np.moveaxis(images.astype(np.float32) / 255.0, -1, 1).copy()
    if mode == "hardcoded_half":
        return normalize(images, ChannelStats.half(images.shape[-1]))
    if mode == "computed_stats":
        if stats is None:
            stats = channel_stats(images)
        return normalize(images, stats)
    raise ValueError(f"unknown normalize mode {mode!r}")

