"""Training loops for the introductory GAN and the DCGAN, plus stabilization helpers."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint, data, ops
from .models import build_pair
from .nn import Module
from .optim import Adam
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

MODELS = ("intro", "dcgan", "style")
NORMALIZE_MODES = ("unit", "hardcoded_half", "computed_stats")


class TrainingDiverged(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    model: str = "intro"
    batch_size: int = 256
    image_size: int = 28
    channels: int = 1
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    latent_dim: int = 100
    epochs: int = 100
    leaky_slope: float = 0.2
    init: str = "default"
    normalize_mode: str = "unit"
    label_smoothing: Optional[tuple] = None
    noisy_label_ratio: float = 0.0
    dropout: float = 0.4
    loss: str = "bce"
    seed: int = 0
    g_width: int = 128
    d_width: int = 64
    grid_every: int = 10
    grid_size: int = 16
    # style model only
    style_channels: int = 32
    mapping_layers: int = 3
    base_resolution: int = 4
    kimg_per_phase: float = 0.6
    gp_lambda: float = 10.0
    drift: float = 1e-3
    ada_target: float = 0.6
    ada_step: float = 0.005
    ada_interval: int = 4
    ada_ema: float = 0.95
    ada_enabled: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.normalize_mode not in NORMALIZE_MODES:
            raise ConfigError(f"normalize_mode must be one of {NORMALIZE_MODES}")
        if self.init not in ("default", "custom"):
            raise ConfigError("init must be 'default' or 'custom'")
        if self.label_smoothing is not None:
            lo, hi = self.label_smoothing
            if lo > hi:
                raise ConfigError("label_smoothing needs lo <= hi")
            if self.loss == "bce" and (lo < 0 or hi > 1):
                raise ConfigError("smoothed labels must stay within [0, 1] for the bce loss")
        if not 0.0 <= self.noisy_label_ratio < 1.0:
            raise ConfigError("noisy_label_ratio must lie in [0, 1)")
        if self.loss not in ("bce", "mse", "wgan_gp"):
            raise ConfigError(f"unknown loss {self.loss!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def intro_config(**overrides) -> TrainConfig:
    """Hyperparameters of the introductory (MNIST-style) model."""
    base = dict(model="intro", batch_size=256, image_size=28, channels=1, lr=2e-4, beta1=0.5,
                latent_dim=100, epochs=100, leaky_slope=0.2, init="default", normalize_mode="unit",
                dropout=0.4, loss="bce", g_width=128, d_width=64)
    base.update(overrides)
    return TrainConfig(**base)


def dcgan_config(**overrides) -> TrainConfig:
    """Hyperparameters of the album-cover DCGAN."""
    base = dict(model="dcgan", batch_size=128, image_size=64, channels=3, lr=2e-4, beta1=0.5,
                latent_dim=100, epochs=5, leaky_slope=0.2, init="default",
                normalize_mode="hardcoded_half", dropout=0.0, loss="bce", g_width=64, d_width=64)
    base.update(overrides)
    return TrainConfig(**base)


def style_config(**overrides) -> TrainConfig:
    """Style model settings; Adam(0, 0.99, 1e-8), batch 16, ADA target 0.6, WGAN-GP."""
    base = dict(model="style", batch_size=16, image_size=32, channels=3, lr=2e-3, beta1=0.0,
                beta2=0.99, eps=1e-8, latent_dim=512, epochs=1, leaky_slope=0.2,
                normalize_mode="hardcoded_half", dropout=0.0, loss="wgan_gp")
    base.update(overrides)
    return TrainConfig(**base)


PRESETS = {"intro": intro_config, "dcgan": dcgan_config, "style": style_config}


def _coerce(name: str, raw: str, current):
    ftype = {f.name: f.type for f in dataclasses.fields(TrainConfig)}[name]
    text = raw.strip()
    if "tuple" in str(ftype):
        if text.lower() in ("", "none", "no"):
            return None
        lo, hi = (float(v) for v in text.replace(",", " ").split())
        return (lo, hi)
    if isinstance(current, bool) or "bool" in str(ftype):
        return text.lower() in ("1", "true", "yes", "on")
    if "int" in str(ftype):
        return int(float(text))
    if "float" in str(ftype):
        return float(text)
    return text


def parse_config_text(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    """Parse flat ``key = value`` lines (``#`` comments allowed) over ``base``."""
    updates = {}
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = value
    return apply_overrides(base, updates)


def apply_overrides(base: Optional[TrainConfig], updates: dict) -> TrainConfig:
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    model = updates.get("model", base.model if base else "intro")
    cfg = base if base is not None and base.model == model else PRESETS[str(model).strip()]()
    values = cfg.to_dict()
    for key, raw in updates.items():
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            values[key] = _coerce(key, raw, values[key]) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    return TrainConfig(**values)


def load_config(path, base: Optional[TrainConfig] = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(), base)


# ---------------------------------------------------------------------------
# history
# ---------------------------------------------------------------------------

@dataclass
class LossHistory:
    records: list = field(default_factory=list)
    ada: dict = field(default_factory=dict)

    def append(self, it: int, g_loss: float, d_loss: float) -> None:
        if self.records and it <= self.records[-1][0]:
            raise ValueError("iterations must be strictly increasing")
        self.records.append((int(it), float(g_loss), float(d_loss)))

    def record_ada(self, it: int, p: float, rt: float) -> None:
        self.ada[int(it)] = (float(p), float(rt))

    @property
    def iters(self) -> np.ndarray:
        return np.array([r[0] for r in self.records], dtype=np.int64)

    @property
    def g_losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.records])

    @property
    def d_losses(self) -> np.ndarray:
        return np.array([r[2] for r in self.records])

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = ["iter", "g_loss", "d_loss"] + (["ada_p", "ada_rt"] if self.ada else [])
            w.writerow(header)
            for it, g, d in self.records:
                row = [it, repr(g), repr(d)]
                if self.ada:
                    p_rt = self.ada.get(it)
                    row += [repr(p_rt[0]), repr(p_rt[1])] if p_rt else ["", ""]
                w.writerow(row)
        return path

    @classmethod
    def from_csv(cls, path) -> "LossHistory":
        hist = cls()
        with Path(path).open() as fh:
            for row in csv.DictReader(fh):
                hist.append(int(row["iter"]), float(row["g_loss"]), float(row["d_loss"]))
                if row.get("ada_p"):
                    hist.record_ada(int(row["iter"]), float(row["ada_p"]), float(row["ada_rt"]))
        return hist


# ---------------------------------------------------------------------------
# stabilization helpers
# ---------------------------------------------------------------------------

def smooth_labels(labels: np.ndarray, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    """One-sided smoothing: real labels (1) become U[lo, hi]; fake labels are untouched."""
    labels = np.asarray(labels, dtype=np.float64)
    out = labels.copy()
    real = labels == 1.0
    if lo == hi:
        out[real] = lo
    else:
        out[real] = rng.uniform(lo, hi, int(real.sum()))
    return out


def noisy_labels(real_batch: np.ndarray, fake_batch: np.ndarray, ratio: float,
                 rng: np.random.Generator):
    """Swap floor(ratio * n) items between the real and the fake batch.

    Returns (real, fake, swap) where ``swap`` = (real_idx, fake_idx); feeding
    the result back through :func:`apply_swap` with the same ``swap`` restores
    the originals.
    """
    n = min(len(real_batch), len(fake_batch))
    k = int(math.floor(ratio * n + 1e-9))
    ri = rng.choice(len(real_batch), size=k, replace=False) if k else np.zeros(0, dtype=np.int64)
    fi = rng.choice(len(fake_batch), size=k, replace=False) if k else np.zeros(0, dtype=np.int64)
    real, fake = apply_swap(real_batch, fake_batch, (ri, fi))
    return real, fake, (ri, fi)


def apply_swap(real_batch: np.ndarray, fake_batch: np.ndarray, swap) -> tuple:
    ri, fi = swap
    real, fake = np.array(real_batch, copy=True), np.array(fake_batch, copy=True)
    real[ri], fake[fi] = fake_batch[fi], real_batch[ri]
    return real, fake


def detect_divergence(history, window: int = 500, factor: float = 1.5) -> Optional[int]:
    """First iteration where the trailing-window mean of g_loss exceeds its running minimum.

    "Exceeds by ``factor``" means mean > min + (factor - 1) * |min|, which is
    the plain ratio test for positive losses and still behaves for
    losses that go negative.
    """
    if isinstance(history, LossHistory):
        iters, g = history.iters, history.g_losses
    else:
        g = np.asarray(history, dtype=np.float64)
        iters = np.arange(len(g))
    if len(g) < window:
        return None
    csum = np.concatenate([[0.0], np.cumsum(g)])
    means = (csum[window:] - csum[:-window]) / window
    running_min = np.minimum.accumulate(means)
    over = means > running_min + (factor - 1.0) * np.abs(running_min) + 1e-12
    hits = np.flatnonzero(over)
    if hits.size == 0:
        return None
    return int(iters[hits[0] + window - 1])


def detect_mode_collapse(sample_batch, center: float = 0.0) -> float:
    """Mean pairwise cosine similarity of samples (relative to ``center``), clipped to [0, 1].

    ``center`` is the midpoint of the generator's output range, so 0 for tanh
    outputs and 0.5 for sigmoid outputs.
    """
    x = np.asarray(sample_batch.data if isinstance(sample_batch, Tensor) else sample_batch,
                   dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two samples")
    x = x.reshape(n, -1) - center
    norms = np.linalg.norm(x, axis=1)
    same = np.all(np.abs(x - x[0]) == 0.0)
    if same:
        return 1.0
    unit = x / np.maximum(norms, 1e-12)[:, None]
    sim = unit @ unit.T
    zero = norms < 1e-12
    # two all-center samples are identical to each other
    sim[np.ix_(zero, zero)] = 1.0
    iu = np.triu_indices(n, 1)
    return float(np.clip(sim[iu], 0.0, 1.0).mean())


def batches_per_epoch(n_images: int, batch_size: int) -> int:
    """Batches per epoch including a ragged final batch."""
    return int(math.ceil(n_images / batch_size))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    generator: Module
    discriminator: Module
    history: LossHistory
    grids: dict
    outdir: Optional[Path] = None
    extra: dict = field(default_factory=dict)


def prepare_images(config: TrainConfig, dataset) -> np.ndarray:
    """Load (if a path) and normalize a dataset to float32 N x C x H x W."""
    if isinstance(dataset, (str, Path)):
        dataset = data.load_images(dataset, config.channels, config.image_size)
    images = np.asarray(dataset)
    if images.dtype != np.uint8:
        raise ValueError("training images must be uint8 N x H x W x C")
    if images.ndim == 3:
        images = images[..., None]
    expected = (config.image_size, config.image_size, config.channels)
    if images.shape[1:] != expected:
        raise ValueError(f"dataset images have shape {images.shape[1:]}, config expects {expected}")
    if len(images) == 0:
        raise ValueError("empty dataset")
    return data.normalize_batch(images, config.normalize_mode)


def _loss(kind: str, pred: Tensor, target: np.ndarray) -> Tensor:
    return ops.loss(kind, pred, Tensor(target.astype(np.float32)))


def _finite(value: Tensor, what: str, it: int) -> float:
    v = value.item()
    if not np.isfinite(v):
        raise TrainingDiverged(f"{what} became non-finite at iteration {it}")
    return v


def generator_output_center(g: Module) -> float:
    lo, hi = getattr(g, "output_range", (-1.0, 1.0))
    return (lo + hi) / 2.0


def render_grid(g: Module, z: np.ndarray) -> np.ndarray:
    """Sample a grid image; batchnorm uses batch statistics and running stats are left untouched."""
    saved = {k: v.copy() for k, v in g.named_buffers()}
    with no_grad():
        out = g(Tensor(z)).data
    for name, buf in g.named_buffers():
        buf[...] = saved[name]
    lo, hi = getattr(g, "output_range", (-1.0, 1.0))
    return data.image_grid(data.to_uint8(out, lo, hi))


def save_network(path, g: Module, d: Optional[Module], config: TrainConfig,
                 progress: Optional[dict] = None) -> Path:
    """Write G (and D) weights with ``G.``/``D.`` prefixes plus a JSON sidecar holding the config."""
    arrays = {f"G.{k}": v for k, v in g.state_dict().items()}
    if d is not None:
        arrays.update({f"D.{k}": v for k, v in d.state_dict().items()})
    path = checkpoint.save(path, arrays)
    side = {"config": config.to_dict(), "progress": progress or {}}
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return path


def load_network(path):
    """Rebuild the generator stored by :func:`save_network`; returns (G, config)."""
    path = Path(path)
    side_path = Path(str(path) + ".json")
    if not side_path.exists():
        raise FileNotFoundError(f"missing network sidecar {side_path}")
    side = json.loads(side_path.read_text())
    cfg_dict = side["config"]
    if cfg_dict.get("label_smoothing") is not None:
        cfg_dict["label_smoothing"] = tuple(cfg_dict["label_smoothing"])
    config = TrainConfig(**cfg_dict)
    arrays = checkpoint.load(path)
    g_state = {k[2:]: v for k, v in arrays.items() if k.startswith("G.")}
    if config.model == "style":
        from .style import StyleGenerator, config_from_train
        g = StyleGenerator(config_from_train(config))
        progress = side.get("progress") or {}
        g.default_level = int(progress.get("level", g.default_level))
        g.default_alpha = float(progress.get("alpha", 1.0))
    else:
        g, _ = build_pair(config, np.random.default_rng(0))
    g.load_state_dict(g_state)
    return g, config


def train(config: TrainConfig, dataset, outdir=None) -> TrainResult:
    """Train the model named by ``config.model`` on ``dataset`` (uint8 images or a directory)."""
    if config.model == "style":
        from .style import train_style
        return train_style(config, dataset, outdir)
    images = prepare_images(config, dataset)
    rng = np.random.default_rng(config.seed)
    g, d = build_pair(config, rng)
    opt_g = Adam(g.parameters(), config.lr, (config.beta1, config.beta2), config.eps)
    opt_d = Adam(d.parameters(), config.lr, (config.beta1, config.beta2), config.eps)
    grid_z = np.random.default_rng(config.seed + 1).standard_normal(
        (config.grid_size, config.latent_dim)).astype(np.float32)
    outdir = Path(outdir) if outdir is not None else None
    history, grids = LossHistory(), {}
    half = config.batch_size // 2
    n = len(images)
    it = 0
    for epoch in range(1, config.epochs + 1):
        for _ in range(batches_per_epoch(n, config.batch_size)):
            it += 1
            # discriminator: half real, half fake, gradients accumulated, one step
            idx = rng.choice(n, size=half, replace=n < half)
            real = images[idx]
            z = rng.standard_normal((half, config.latent_dim)).astype(np.float32)
            with no_grad():
                fake = g(Tensor(z)).data
            if config.noisy_label_ratio > 0:
                real, fake, _ = noisy_labels(real, fake, config.noisy_label_ratio, rng)
            y_real = np.ones(half)
            if config.label_smoothing is not None:
                y_real = smooth_labels(y_real, *config.label_smoothing, rng)
            opt_d.zero_grad()
            loss_real = _loss(config.loss, d(Tensor(real)), y_real)
            loss_real.backward()
            loss_fake = _loss(config.loss, d(Tensor(fake)), np.zeros(half))
            loss_fake.backward()
            d_loss = _finite(loss_real, "d_loss", it) + _finite(loss_fake, "d_loss", it)
            opt_d.step()
            # generator: a full batch of fresh fakes judged against "real" labels
            opt_g.zero_grad()
            z = rng.standard_normal((config.batch_size, config.latent_dim)).astype(np.float32)
            g_loss_t = _loss(config.loss, d(g(Tensor(z))), np.ones(config.batch_size))
            g_loss_t.backward()
            g_loss = _finite(g_loss_t, "g_loss", it)
            opt_g.step()
            d.zero_grad()
            history.append(it, g_loss, d_loss)
        log.info("epoch %d/%d  g_loss=%.4f  d_loss=%.4f", epoch, config.epochs, g_loss, d_loss)
        if epoch % config.grid_every == 0 or epoch == config.epochs:
            grids[epoch] = render_grid(g, grid_z)
            if outdir is not None:
                data.save_png(outdir / "grids" / f"epoch-{epoch:04d}.png", grids[epoch])
        if outdir is not None:
            save_network(outdir / "checkpoints" / f"epoch-{epoch:04d}.dgck", g, d, config)
    if outdir is not None:
        history.to_csv(outdir / "loss.csv")
        save_network(outdir / "network.dgck", g, d, config)
    return TrainResult(g, d, history, grids, outdir)


def sample_images(g: Module, z: np.ndarray) -> np.ndarray:
    with no_grad():
        return g(Tensor(z)).data
