"""Imagery tiles: fetching by quadkey with a disk cache, grayscale
conversion, and collecting the tiles a route passes through.

Cache and directory sources share one layout: ``<root>/<map version>/<quadkey>.png``.
"""

from __future__ import annotations

import io
import logging
import math
import os
import tempfile
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import geo

log = logging.getLogger(__name__)

CACHE_ENV = "LANEMAP_CACHE_DIR"
DEFAULT_URL_TEMPLATE = "http://a0.ortho.tiles.virtualearth.net/tiles/a/[quadkey].jpeg?g=[map version]"


class TileFetchError(RuntimeError):
    """Tile could not be retrieved; retrying may help."""

    def __init__(self, quadkey: str, message: str):
        super().__init__(f"tile {quadkey}: {message}")
        self.quadkey = quadkey


class TileDecodeError(TileFetchError):
    """Payload was retrieved but is not a decodable image."""


@dataclass
class Raster:
    """Row-major ``(height, width)`` or ``(height, width, 3)`` uint8 image.

    ``georef`` is ``(tile_x, tile_y, level)`` of the top-left tile the raster
    starts at, or None.
    """

    pixels: np.ndarray
    georef: tuple[int, int, int] | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim not in (2, 3) or (self.pixels.ndim == 3 and self.pixels.shape[2] != 3):
            raise ValueError(f"bad raster shape {self.pixels.shape}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3

    @property
    def origin_px(self) -> tuple[int, int]:
        """Global pixel coordinates of the top-left corner."""
        tx, ty, _ = self.georef
        return tx * geo.TILE_SIZE, ty * geo.TILE_SIZE

    def to_png(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.pixels.astype(np.uint8)).save(buf, format="PNG", optimize=False)
        return buf.getvalue()


def decode_image(data: bytes, quadkey: str = "?") -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as im:
            im = im.convert("L") if im.mode in ("L", "1", "I", "I;16") else im.convert("RGB")
            return np.asarray(im, dtype=np.uint8)
    except Exception as exc:  # PIL raises a zoo of exception types
        raise TileDecodeError(quadkey, f"cannot decode image: {exc}") from None


def to_grayscale(r: Raster) -> Raster:
    """BT.601 luma, rounded; single-channel input is returned unchanged."""
    if r.channels == 1:
        return r
    rgb = r.pixels.astype(np.float64)
    luma = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    # Half-up rounding; the coefficients sum to 1 so 255 maps to 255.
    return Raster(np.clip(np.floor(luma + 0.5 + 1e-9), 0, 255).astype(np.uint8), r.georef)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tile(root, map_version: int, quadkey: str, r: Raster) -> Path:
    path = Path(root) / str(map_version) / f"{quadkey}.png"
    _atomic_write(path, r.to_png())
    return path


@dataclass
class TileSource:
    mode: str = "directory"
    url_template: str = DEFAULT_URL_TEMPLATE
    cache_dir: Path | None = None
    map_version: int = 0
    directory: Path | None = None
    timeout: float = 30.0
    source_accesses: int = field(default=0, init=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    def __post_init__(self):
        if self.mode not in ("http", "directory"):
            raise ValueError(f"unknown tile source mode {self.mode!r}")
        if self.mode == "directory" and self.directory is None:
            raise ValueError("directory mode needs a directory")
        env = os.environ.get(CACHE_ENV)
        if env:
            self.cache_dir = Path(env)
        if self.cache_dir is not None:
            self.cache_dir = Path(self.cache_dir)
        if self.directory is not None:
            self.directory = Path(self.directory)

    def cache_path(self, quadkey: str) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / str(self.map_version) / f"{quadkey}.png"

    def url_for(self, quadkey: str) -> str:
        return self.url_template.replace("[quadkey]", quadkey).replace("[map version]", str(self.map_version))

    def _read_source(self, quadkey: str) -> bytes:
        with self._lock:
            self.source_accesses += 1
        if self.mode == "directory":
            path = self.directory / str(self.map_version) / f"{quadkey}.png"
            try:
                return path.read_bytes()
            except OSError as exc:
                raise TileFetchError(quadkey, f"cannot read {path}: {exc.strerror}") from None
        url = self.url_for(quadkey)
        try:
            with urllib.request.urlopen(url, timeout=self.timeout) as resp:
                return resp.read()
        except (urllib.error.URLError, OSError) as exc:
            raise TileFetchError(quadkey, f"GET {url} failed: {exc}") from None


def fetch_tile(src: TileSource, quadkey: str) -> Raster:
    tx, ty, level = geo.quadkey_to_tile(quadkey)
    cached = src.cache_path(quadkey)
    if cached is not None and cached.exists():
        return Raster(decode_image(cached.read_bytes(), quadkey), (tx, ty, level))
    data = src._read_source(quadkey)
    pixels = decode_image(data, quadkey)
    r = Raster(pixels, (tx, ty, level))
    if r.width != geo.TILE_SIZE or r.height != geo.TILE_SIZE:
        raise TileDecodeError(quadkey, f"expected 256x256, got {r.width}x{r.height}")
    if cached is not None:
        # Re-encode so the cache is always PNG whatever the source format.
        _atomic_write(cached, data if data[:8] == b"\x89PNG\r\n\x1a\n" else r.to_png())
    return r


def tiles_along_polyline(xy: np.ndarray, buffer_px: float = 0.0) -> list[tuple[int, int]]:
    """Tiles whose footprint intersects a global-pixel polyline, in route order.

    Without a buffer every tile in a segment's bounding box is clipped against
    the segment exactly. With ``buffer_px`` the corridor is sampled every 8 px
    across and along, which is dense enough to visit every 256-px tile.
    """
    xy = np.asarray(xy, dtype=float)
    seen: dict[tuple[int, int], None] = {}
    ts = geo.TILE_SIZE
    for a, b in zip(xy[:-1], xy[1:]):
        if buffer_px > 0:
            d = b - a
            length = float(np.hypot(*d))
            f = np.linspace(0.0, 1.0, max(1, math.ceil(length / 8.0)) + 1)
            normal = np.array([-d[1], d[0]]) / max(length, 1e-12)
            offsets = np.unique(np.concatenate([np.arange(-buffer_px, buffer_px, 8.0), [buffer_px]]))
            pts = (a + f[:, None] * d)[:, None, :] + offsets[None, :, None] * normal
            for cx, cy in np.floor(pts.reshape(-1, 2) / ts).astype(int):
                seen.setdefault((int(cx), int(cy)), None)
            continue
        cx0, cy0 = np.floor(np.minimum(a, b) / ts).astype(int)
        cx1, cy1 = np.floor(np.maximum(a, b) / ts).astype(int)
        cells = [(cx, cy) for cx in range(cx0, cx1 + 1) for cy in range(cy0, cy1 + 1)]
        hits = [c for c in cells if _segment_hits_tile(a, b, c)]
        if not hits:
            hits = [tuple(np.floor(a / ts).astype(int))]
        # order along the segment by the parameter of the tile centre
        d = b - a
        denom = float(d @ d) or 1.0
        hits.sort(key=lambda c: float(((np.array(c) + 0.5) * ts - a) @ d) / denom)
        for cx, cy in hits:
            seen.setdefault((int(cx), int(cy)), None)
    return list(seen)


def _segment_hits_tile(p, q, cell) -> bool:
    ts = geo.TILE_SIZE
    x0, y0 = cell[0] * ts, cell[1] * ts
    x1, y1 = x0 + ts, y0 + ts
    # Liang-Barsky clipping against the half-open tile square.
    t0, t1 = 0.0, 1.0
    dx, dy = q[0] - p[0], q[1] - p[1]
    for pk, qk in ((-dx, p[0] - x0), (dx, x1 - p[0]), (-dy, p[1] - y0), (dy, y1 - p[1])):
        if pk == 0:
            if qk < 0:
                return False
            continue
        r = qk / pk
        if pk < 0:
            t0 = max(t0, r)
        else:
            t1 = min(t1, r)
        if t0 > t1:
            return False
    return t1 - t0 > 1e-12


def mosaic_route(src: TileSource, route, level: int, buffer_m: float = 0.0) -> list[tuple[str, Raster]]:
    """Fetch every tile the route polyline crosses, once each, in route order.

    ``route`` is a :class:`~lanemap.roadmodel.BoundaryLine` or an ``(n, 2)``
    lat/lon array. ``buffer_m`` widens the footprint to a corridor.
    """
    latlon = route.latlon() if hasattr(route, "latlon") else np.asarray(route, dtype=float)
    x, y = geo.latlon_to_pixel_arr(latlon[:, 0], latlon[:, 1], level)
    buffer_px = buffer_m / geo.ground_resolution(float(np.mean(latlon[:, 0])), level) if buffer_m else 0.0
    out = []
    for tx, ty in tiles_along_polyline(np.stack([x, y], axis=-1), buffer_px):
        qk = geo.tile_quadkey(tx, ty, level)
        out.append((qk, fetch_tile(src, qk)))  # errors already name the quadkey
    return out


class Canvas:
    """Random access to grayscale pixels across a set of tiles.

    Windows are addressed in global pixel coordinates; pixels of tiles that
    are not loaded read as ``fill``.
    """

    def __init__(self, tiles, level: int, fill: float = 0.0):
        self.level = level
        self.fill = fill
        self.tiles: dict[tuple[int, int], np.ndarray] = {}
        for _, r in tiles:
            g = to_grayscale(r)
            tx, ty, _ = r.georef
            self.tiles[(tx, ty)] = g.pixels.astype(np.float32)

    def window(self, x0: int, y0: int, w: int, h: int) -> np.ndarray:
        out = np.full((h, w), self.fill, dtype=np.float32)
        ts = geo.TILE_SIZE
        for ty in range(y0 // ts, (y0 + h - 1) // ts + 1):
            for tx in range(x0 // ts, (x0 + w - 1) // ts + 1):
                tile = self.tiles.get((tx, ty))
                if tile is None:
                    continue
                gx0, gy0 = tx * ts, ty * ts
                ax0, ay0 = max(x0, gx0), max(y0, gy0)
                ax1, ay1 = min(x0 + w, gx0 + ts), min(y0 + h, gy0 + ts)
                out[ay0 - y0 : ay1 - y0, ax0 - x0 : ax1 - x0] = tile[ay0 - gy0 : ay1 - gy0, ax0 - gx0 : ax1 - gx0]
        return out

    def has(self, tx: int, ty: int) -> bool:
        return (tx, ty) in self.tiles
