"""Synthetic fixture data and a local HTTP server that mimics the playlist API."""
from __future__ import annotations

import io
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional
from urllib.parse import parse_qs, urlparse

import numpy as np
from PIL import Image, ImageDraw

# seven-segment layout on a 3 x 5 unit grid: (x0, y0, x1, y1)
_SEGMENTS = {
    "a": (0, 0, 2, 0), "b": (2, 0, 2, 2), "c": (2, 2, 2, 4), "d": (0, 4, 2, 4),
    "e": (0, 2, 0, 4), "f": (0, 0, 0, 2), "g": (0, 2, 2, 2),
}
_DIGITS = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg"]


def digit_images(n: int, size: int = 28, seed: int = 0) -> np.ndarray:
    """Stroke-drawn digits on black, uint8 n x size x size x 1 (MNIST-like texture)."""
    rng = np.random.default_rng(seed)
    out = np.zeros((n, size, size, 1), dtype=np.uint8)
    for i in range(n):
        im = Image.new("L", (size, size), 0)
        draw = ImageDraw.Draw(im)
        digit = _DIGITS[int(rng.integers(10))]
        unit = size / 6.0 * rng.uniform(0.8, 1.1)
        ox = size / 2 - unit + rng.uniform(-2, 2)
        oy = size / 2 - 2 * unit + rng.uniform(-2, 2)
        slant = rng.uniform(-0.25, 0.25)
        width = max(1, int(round(size / 12 * rng.uniform(0.8, 1.3))))
        for seg in digit:
            x0, y0, x1, y1 = _SEGMENTS[seg]
            p0 = (ox + unit * x0 + slant * unit * (2 - y0), oy + unit * y0)
            p1 = (ox + unit * x1 + slant * unit * (2 - y1), oy + unit * y1)
            draw.line([p0, p1], fill=int(rng.integers(200, 256)), width=width)
        out[i, ..., 0] = np.asarray(im)
    return out


def cover_images(n: int, size: int = 64, seed: int = 0) -> np.ndarray:
    """Flat-colour 'album covers': a background plus a few shapes, uint8 n x size x size x 3."""
    rng = np.random.default_rng(seed)
    out = np.zeros((n, size, size, 3), dtype=np.uint8)
    for i in range(n):
        bg = tuple(int(v) for v in rng.integers(0, 256, 3))
        im = Image.new("RGB", (size, size), bg)
        draw = ImageDraw.Draw(im)
        # shape extents are 6 .. size/2 px; small sizes shrink the range so tiny fixtures still work
        lo = min(6, max(size // 2 - 1, 1))
        hi = max(size // 2, lo + 1)
        for _ in range(int(rng.integers(1, 4))):
            x0, y0 = rng.integers(0, max(size - 8, 1), 2)
            x1, y1 = x0 + rng.integers(lo, hi), y0 + rng.integers(lo, hi)
            fill = tuple(int(v) for v in rng.integers(0, 256, 3))
            if rng.random() < 0.5:
                draw.ellipse([int(x0), int(y0), int(x1), int(y1)], fill=fill)
            else:
                draw.rectangle([int(x0), int(y0), int(x1), int(y1)], fill=fill)
        out[i] = np.asarray(im)
    return out


def write_images(folder, images: np.ndarray, prefix: str = "img") -> list:
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, a in enumerate(images):
        arr = a[..., 0] if a.shape[-1] == 1 else a
        p = folder / f"{prefix}{i:04d}.png"
        Image.fromarray(arr).save(p, format="png")
        paths.append(p)
    return paths


def png_bytes(seed: int, size: int = 16) -> bytes:
    img = cover_images(1, size, seed)[0]
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="png")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# playlist API fixture
# ---------------------------------------------------------------------------

def _track(album_id: Optional[str], n_images: int = 3) -> dict:
    if album_id is None:
        return {"track": {"album": None}}
    images = [{"url": f"/images/{album_id}/{k}.png"} for k in range(n_images)]
    return {"track": {"album": {"id": album_id, "images": images}}}


def default_catalog() -> dict:
    """Playlists used by the tests and the acceptance suite.

    ``pl-small``: 3 tracks from 2 albums, plus a null track and a null album.
    ``pl-paged``: 100 tracks over two pages of 50 (albums a000..a059, some repeated).
    ``pl-thin``: one album with a single image (skipped).
    ``pl-broken``: the second page returns HTTP 500.
    """
    small = [_track("alb-red"), _track("alb-blue"), _track("alb-red"),
             {"track": None}, _track(None)]
    paged = [_track(f"a{i % 60:03d}") for i in range(100)]
    thin = [_track("alb-thin", n_images=1), _track("alb-blue")]
    broken = [_track("alb-green")] * 3 + [_track("alb-never")] * 3
    return {"pl-small": small, "pl-paged": paged, "pl-thin": thin, "pl-broken": broken}


class _Handler(BaseHTTPRequestHandler):
    server: "FixtureServer"

    def log_message(self, fmt, *args):  # keep test output quiet
        pass

    def _send(self, code: int, body: bytes, ctype: str) -> None:
        self.send_response(code)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        srv = self.server
        srv.hits.append(self.path)
        srv.auth_headers.append(self.headers.get("Authorization"))
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        if len(parts) == 3 and parts[0] == "playlists" and parts[2] == "items":
            pid = parts[1]
            if pid not in srv.catalog:
                return self._send(404, b'{"error": "not found"}', "application/json")
            q = parse_qs(url.query)
            offset = int(q.get("offset", ["0"])[0])
            limit = int(q.get("limit", [str(srv.page_size)])[0])
            if pid == "pl-broken" and offset > 0:
                return self._send(500, b'{"error": "boom"}', "application/json")
            items = srv.catalog[pid]
            page = items[offset:offset + limit]
            nxt = None
            if offset + limit < len(items):
                nxt = f"{srv.base_url}/playlists/{pid}/items?offset={offset + limit}&limit={limit}"
            page = [self._absolute(it) for it in page]
            body = json.dumps({"items": page, "next": nxt}).encode()
            return self._send(200, body, "application/json")
        if len(parts) == 3 and parts[0] == "images":
            if parts[1] in srv.dead_albums:
                return self._send(404, b"", "text/plain")
            seed = sum(parts[1].encode()) * 31 + int(parts[2].split(".")[0])
            return self._send(200, png_bytes(seed), "image/png")
        self._send(404, b"", "text/plain")

    def _absolute(self, item: dict) -> dict:
        item = json.loads(json.dumps(item))
        album = (item.get("track") or {}).get("album")
        if album:
            for img in album["images"]:
                img["url"] = self.server.base_url + img["url"]
        return item


class FixtureServer(ThreadingHTTPServer):
    """Threaded local server; use as a context manager."""

    daemon_threads = True

    def __init__(self, catalog: Optional[dict] = None, page_size: int = 50,
                 dead_albums=(), port: int = 0):
        super().__init__(("127.0.0.1", port), _Handler)
        self.catalog = catalog if catalog is not None else default_catalog()
        self.page_size = page_size
        self.dead_albums = set(dead_albums)
        self.hits: list = []
        self.auth_headers: list = []
        self._thread: Optional[threading.Thread] = None

    @property
    def base_url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "FixtureServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
