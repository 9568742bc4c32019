"""Command-line entry point: ``deskgan <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import subprocess
import sys
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import checkpoint, data, fixtures, latent, metrics, playlist
from .train import ConfigError, PRESETS, apply_overrides, load_config, load_network, train

log = logging.getLogger("deskgan")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------

def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """JSON record written to the output directory before any work starts."""

    def __init__(self, outdir, command: str, args: argparse.Namespace, seed: Optional[int] = None):
        self.path = Path(outdir) / MANIFEST
        flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                 if k not in ("func",)}
        self.record = {"command": command, "flags": flags, "seed": seed,
                       "started": _now(), "finished": None, "status": "running",
                       "git_describe": git_describe(), "outputs": [], "extra": {}}
        self.write()

    def write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.record, indent=2, sort_keys=True, default=str) + "\n")

    def add_output(self, path) -> None:
        self.record["outputs"].append(str(path))

    def finish(self, status: str = "ok", **extra) -> None:
        self.record["finished"] = _now()
        self.record["status"] = status
        self.record["extra"].update(extra)
        self.write()


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def parse_seeds(text: str) -> list:
    """'600-605' or '1,4,7-9' -> list of non-negative ints."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = (int(v) for v in part.split("-", 1))
            if hi < lo:
                raise UsageError(f"bad seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise UsageError("no seeds given")
    return seeds


def _require_style(g):
    from .style import StyleGenerator
    if not isinstance(g, StyleGenerator):
        raise UsageError("this command needs a network trained with --model style")
    return g


def _load_target(path, g) -> np.ndarray:
    res = g.output_resolution
    with Image.open(path) as im:
        im = im.convert("RGB" if g.cfg.image_channels == 3 else "L")
        if im.size != (res, res):
            im = im.resize((res, res), Image.Resampling.LANCZOS)
        a = np.asarray(im, dtype=np.float32)
    if a.ndim == 2:
        a = a[..., None]
    return np.moveaxis(a / 127.5 - 1.0, -1, 0)


def _save_image(path, chw: np.ndarray, g) -> Path:
    lo, hi = getattr(g, "output_range", (-1.0, 1.0))
    return data.save_png(path, data.to_uint8(chw, lo, hi))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_dataset(args) -> int:
    man = RunManifest(args.dest, "dataset", args)
    count = data.prepare_dataset(args.source, args.dest, args.width, args.height)
    stats = None
    if count:
        imgs = data.load_images(args.dest, 3)
        stats = data.channel_stats(imgs)
    meta = data.write_metadata(args.dest, args.width, args.height, count, stats)
    man.add_output(meta)
    man.finish(count=count)
    print(f"wrote {count} images to {args.dest}")
    return EXIT_OK


def _train_config(args):
    base = PRESETS[args.model]() if args.model else None
    cfg = load_config(args.config, base) if args.config else (base or PRESETS["intro"]())
    overrides = {}
    if args.model:
        overrides["model"] = args.model
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    return apply_overrides(cfg, overrides) if overrides else cfg


def cmd_train(args) -> int:
    if args.gpus is not None:
        log.warning("--gpus %s ignored: training runs on the CPU", args.gpus)
    cfg = _train_config(args)
    man = RunManifest(args.outdir, "train", args, cfg.seed)
    man.record["extra"]["config"] = cfg.to_dict()
    man.write()
    result = train(cfg, args.data, args.outdir)
    man.add_output(Path(args.outdir) / "network.dgck")
    man.add_output(Path(args.outdir) / "loss.csv")
    man.finish(iterations=len(result.history), **result.extra)
    print(f"trained {len(result.history)} iterations; network at {Path(args.outdir) / 'network.dgck'}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .style import truncate_z
    from .tensor import Tensor, no_grad
    try:
        seeds = parse_seeds(args.seeds)
    except ValueError as exc:
        raise UsageError(f"bad --seeds value {args.seeds!r}") from exc
    man = RunManifest(args.outdir, "generate", args)
    man.record["extra"]["tau"] = args.trunc
    man.write()
    g, cfg = load_network(args.network)
    g.eval()
    for seed in seeds:
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((1, cfg.latent_dim)).astype(np.float32)
        if args.trunc is not None:
            z = truncate_z(z, args.trunc, rng)
        with no_grad():
            img = g(Tensor(z)).data[0]
        man.add_output(_save_image(Path(args.outdir) / f"seed{seed:04d}.png", img, g))
    man.finish(count=len(seeds), tau=args.trunc)
    print(f"wrote {len(seeds)} images to {args.outdir}")
    return EXIT_OK


def cmd_project(args) -> int:
    from .style import render
    man = RunManifest(args.outdir, "project", args, args.seed)
    g = _require_style(load_network(args.network)[0])
    target = _load_target(args.target, g)
    run = latent.project(target, g, steps=args.num_steps, lr=args.lr, seed=args.seed)
    out = Path(args.outdir)
    man.add_output(checkpoint.save_style_vector(out / "projected_w.dgck", run.w))
    man.add_output(_save_image(out / "proj.png", render(g, run.w)[0], g))
    man.add_output(_save_image(out / "target.png", target, g))
    (out / "trace.csv").write_text("step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(run.trace)))
    man.finish(**run.metadata())
    print(f"projected in {run.steps} steps: loss {run.trace[0]:.4f} -> {run.final_loss:.4f}")
    return EXIT_OK


def cmd_mix(args) -> int:
    man = RunManifest(args.outdir, "mix", args)
    g = _require_style(load_network(args.network)[0])
    ws = [checkpoint.load_style_vector(p) for p in args.sources]
    labels = [Path(p).stem for p in args.sources]
    grid = latent.mixing_grid(ws, args.k, g, labels)
    out = Path(args.outdir)
    man.add_output(data.save_png(out / "mix_grid.png", grid.image))
    man.add_output(grid.save_sidecar(out / "mix_grid.json"))
    n = len(ws)
    for i in range(n):
        for j in range(n):
            man.add_output(data.save_png(out / f"mix_r{i}_c{j}.png", grid.tiles[i, j]))
    man.finish(k=args.k, sources=n)
    print(f"wrote {n}x{n} mixing grid with k={args.k}")
    return EXIT_OK


def cmd_interpolate(args) -> int:
    man = RunManifest(args.outdir, "interpolate", args)
    g = _require_style(load_network(args.network)[0])
    wa, wb = checkpoint.load_style_vector(args.a), checkpoint.load_style_vector(args.b)
    frames = latent.interpolation_sequence(wa, wb, args.divisions, g)
    for i, frame in enumerate(frames):
        man.add_output(data.save_png(Path(args.outdir) / f"frame{i:04d}.png", frame))
    man.finish(frames=len(frames))
    print(f"wrote {len(frames)} frames")
    return EXIT_OK


def cmd_fetch(args) -> int:
    man = RunManifest(args.dest, "fetch", args)
    query = playlist.PlaylistQuery(args.playlists, args.base_url)
    errors: dict = {}
    albums = playlist.fetch_covers(query, errors=errors)
    count = 0
    if not args.no_download:
        count = playlist.download_all(albums, args.dest, args.parallelism)
    albums_path = Path(args.dest) / "albums.json"
    albums_path.write_text(json.dumps(albums, indent=2, sort_keys=True) + "\n")
    man.add_output(albums_path)
    man.finish(albums=len(albums), downloaded=count, errors=errors)
    print(f"{len(albums)} unique albums, {count} downloaded")
    return EXIT_OK


def cmd_fid(args) -> int:
    out = Path(args.out)
    man = RunManifest(out.parent, "fid", args)
    report = metrics.fid_report(args.real, args.fake, out, kimg=args.kimg)
    man.add_output(out)
    man.finish(fid=report["fid"])
    for w in report["warnings"]:
        log.warning(w)
    print(f"fid {report['fid']:.6f}")
    return EXIT_OK


def cmd_fixtures(args) -> int:
    if args.kind == "digits":
        imgs = fixtures.digit_images(args.n, args.size, args.seed)
    else:
        imgs = fixtures.cover_images(args.n, args.size, args.seed)
    fixtures.write_images(args.dest, imgs, prefix=args.kind[:-1])
    print(f"wrote {args.n} {args.kind} fixtures to {args.dest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deskgan", description="Desk-scale GAN toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("dataset", help="resize a folder of images into a training set")
    s.add_argument("--source", required=True, type=Path)
    s.add_argument("--dest", required=True, type=Path)
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--height", type=int, default=256)
    s.set_defaults(func=cmd_dataset)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--outdir", required=True, type=Path)
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--model", choices=sorted(PRESETS))
    s.add_argument("--config", type=Path, help="flat key=value file; flags override it")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    s.add_argument("--gpus", type=int, help="accepted for compatibility; ignored")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="render images for a list of seeds")
    s.add_argument("--network", required=True, type=Path)
    s.add_argument("--seeds", required=True)
    s.add_argument("--trunc", type=float)
    s.add_argument("--outdir", required=True, type=Path)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("project", help="find the style vector of a target image")
    s.add_argument("--target", required=True, type=Path)
    s.add_argument("--network", required=True, type=Path)
    s.add_argument("--num-steps", type=int, default=latent.DEFAULT_STEPS)
    s.add_argument("--lr", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--outdir", required=True, type=Path)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("mix", help="style-mix a set of style vectors")
    s.add_argument("--network", required=True, type=Path)
    s.add_argument("--sources", required=True, nargs="+", type=Path)
    s.add_argument("--k", type=int, default=latent.DEFAULT_MIX)
    s.add_argument("--outdir", required=True, type=Path)
    s.set_defaults(func=cmd_mix)

    s = sub.add_parser("interpolate", help="render frames between two style vectors")
    s.add_argument("--network", required=True, type=Path)
    s.add_argument("--a", required=True, type=Path)
    s.add_argument("--b", required=True, type=Path)
    s.add_argument("--divisions", type=int, default=latent.DEFAULT_DIVISIONS)
    s.add_argument("--outdir", required=True, type=Path)
    s.set_defaults(func=cmd_interpolate)

    s = sub.add_parser("fetch", help="collect album covers from playlists")
    s.add_argument("--playlists", required=True, nargs="+")
    s.add_argument("--dest", required=True, type=Path)
    s.add_argument("--base-url", required=True)
    s.add_argument("--parallelism", type=int, default=None)
    s.add_argument("--no-download", action="store_true")
    s.set_defaults(func=cmd_fetch)

    s = sub.add_parser("fid", help="toy Frechet distance between two image folders")
    s.add_argument("--real", required=True, type=Path)
    s.add_argument("--fake", required=True, type=Path)
    s.add_argument("--out", type=Path, default=Path("fid.json"))
    s.add_argument("--kimg", type=float)
    s.set_defaults(func=cmd_fid)

    s = sub.add_parser("fixtures", help="write synthetic fixture images")
    s.add_argument("--kind", choices=("digits", "covers"), default="covers")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dest", required=True, type=Path)
    s.set_defaults(func=cmd_fixtures)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"deskgan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        log.debug("failure", exc_info=True)
        print(f"deskgan {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
