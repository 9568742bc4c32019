"""Playlist-driven album cover fetcher."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional
from urllib.parse import urlparse

import requests

log = logging.getLogger(__name__)

TOKEN_ENV = "DESKGAN_API_TOKEN"
DEFAULT_TIMEOUT = 10.0


@dataclass
class PlaylistQuery:
    playlist_ids: list
    base_url: str
    token: Optional[str] = None

    def __post_init__(self):
        self.playlist_ids = [str(p) for p in self.playlist_ids]
        if not self.playlist_ids:
            raise ValueError("at least one playlist id is required")
        self.base_url = self.base_url.rstrip("/")
        if self.token is None:
            self.token = os.environ.get(TOKEN_ENV)


class PlaylistClient:
    """Thin wrapper around ``requests`` for the playlist items endpoint."""

    def __init__(self, base_url: str, token: Optional[str] = None, timeout: float = DEFAULT_TIMEOUT,
                 session: Optional[requests.Session] = None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.session = session or requests.Session()
        if token:
            self.session.headers["Authorization"] = f"Bearer {token}"

    def _get(self, url: str) -> dict:
        resp = self.session.get(url, timeout=self.timeout)
        resp.raise_for_status()
        return resp.json()

    def playlist_items(self, playlist_id: str) -> dict:
        return self._get(f"{self.base_url}/playlists/{playlist_id}/items")

    def next(self, page: dict) -> Optional[dict]:
        if page.get("next") is None:
            return None
        return self._get(page["next"])


def _cover_url(item: dict) -> Optional[tuple]:
    track = item.get("track")
    if track is None or track.get("album") is None:
        return None
    album = track["album"]
    images = album.get("images") or []
    if len(images) < 2:
        return None
    return album["id"], images[1]["url"]


def fetch_covers(query: PlaylistQuery, client: Optional[PlaylistClient] = None,
                 errors: Optional[dict] = None) -> dict:
    """Collect album id -> cover URL (the second image entry) over every playlist page.

    A failing playlist is logged, recorded in ``errors`` and skipped; albums
    already collected from its earlier pages are kept. When one album id
    appears with different URLs, the smallest URL wins so the result does
    not depend on playlist order.
    """
    client = client or PlaylistClient(query.base_url, query.token)
    albums: dict = {}
    for pid in query.playlist_ids:
        try:
            page = client.playlist_items(pid)
        except (requests.RequestException, ValueError) as exc:
            log.warning("playlist %s failed: %s", pid, exc)
            if errors is not None:
                errors[pid] = str(exc)
            continue
        while page is not None:
            for item in page.get("items", []):
                found = _cover_url(item)
                if found is None:
                    continue
                album_id, url = found
                if album_id not in albums or url < albums[album_id]:
                    albums[album_id] = url
            try:
                page = client.next(page)
            except (requests.RequestException, ValueError) as exc:
                log.warning("exception, continuing to next playlist (%s): %s", pid, exc)
                if errors is not None:
                    errors[pid] = str(exc)
                break
    return albums


def default_parallelism() -> int:
    return max(1, (os.cpu_count() or 2) - 1)


def _extension(url: str) -> str:
    suffix = Path(urlparse(url).path).suffix.lower()
    return suffix if suffix in (".png", ".jpg", ".jpeg", ".gif", ".webp") else ".jpg"


def _download_one(session: requests.Session, album_id: str, url: str, dest: Path,
                  timeout: float) -> Optional[Path]:
    target = dest / f"{album_id}{_extension(url)}"
    last: Optional[Exception] = None
    for _ in range(2):  # one retry
        try:
            resp = session.get(url, timeout=timeout)
            resp.raise_for_status()
        except requests.RequestException as exc:
            last = exc
            continue
        tmp = target.with_suffix(target.suffix + ".part")
        tmp.write_bytes(resp.content)
        os.replace(tmp, target)
        return target
    log.error("download of %s failed after retry: %s", album_id, last)
    return None


def download_all(urls: Mapping[str, str], dest, parallelism: Optional[int] = None,
                 timeout: float = DEFAULT_TIMEOUT) -> int:
    """Download every album cover to ``dest/<album_id>.<ext>``; returns the number written."""
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    workers = parallelism or default_parallelism()
    if workers < 1:
        raise ValueError("parallelism must be >= 1")
    session = requests.Session()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_download_one, session, aid, url, dest, timeout)
                   for aid, url in sorted(urls.items())]
        results = [f.result() for f in futures]
    return sum(r is not None for r in results)
