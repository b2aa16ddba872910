"""Deterministic synthetic highway scenes with exact ground truth.

A scene is a constant-curvature road with ``lane_count`` lanes: two solid
edge lines, dashed lines in between and the trajectory along the centre. It
is rendered straight into 256 px web-Mercator tiles (bright paint on dark
asphalt, green verge, optional curb and guardrail just off the road), then
blurred and given sensor noise. Every random choice comes from ``seed``.
"""

from __future__ import annotations

import configparser
import math
import uuid
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter, map_coordinates

from . import geo
from .roadmodel import BoundaryLine, RoadModel, RoadSurface, RouteFrame, chunk_road, polyline_length
from .tiles import Raster, write_tile

ASPHALT = (90.0, 90.0, 90.0)
PAINT = (220.0, 220.0, 220.0)
VERGE = (95.0, 125.0, 80.0)
CURB = (172.0, 170.0, 168.0)
GUARDRAIL = (205.0, 205.0, 210.0)

SHOULDER = 0.5  # road surface beyond the outer marking centre, meters
CURB_GAP, CURB_WIDTH = 0.35, 0.25
GUARDRAIL_GAP, GUARDRAIL_WIDTH = 1.5, 0.35
MIN_IMAGERY_REACH = 12.0  # meters either side of the centreline
DISTRACTORS = ("guardrail", "curb")


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    origin: geo.GeoPoint = geo.GeoPoint(48.2203, 11.5126)
    length: float = 1000.0
    lane_count: int = 3
    lane_width: float = 3.5
    curvature: float = 0.0
    heading: float = 30.0  # degrees clockwise from north
    dash_length: float = 6.0
    dash_gap: float = 12.0
    marking_width: float = 0.2
    blur_sigma: float = 1.0
    noise_sigma: float = 4.0
    occlusions: tuple[tuple[float, float, tuple[int, ...]], ...] = ()
    distractors: frozenset[str] = frozenset()
    seed: int = 0
    level: int = 20
    map_version: int = 1

    def __post_init__(self):
        if not isinstance(self.lane_count, int) or self.lane_count < 1:
            raise SceneError("lane_count must be an integer >= 1")
        if not self.lane_width > self.marking_width > 0:
            raise SceneError("need lane_width > marking_width > 0")
        if self.dash_length <= 0 or self.dash_gap <= 0:
            raise SceneError("dash lengths must be positive")
        if self.length <= 0:
            raise SceneError("length must be positive")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise SceneError("blur and noise must be non-negative")
        for start, end, _ in self.occlusions:
            if not 0 <= start <= end <= self.length:
                raise SceneError(f"occlusion ({start}, {end}) outside [0, {self.length}]")
        unknown = set(self.distractors) - set(DISTRACTORS)
        if unknown:
            raise SceneError(f"unknown distractors {sorted(unknown)}")
        if not geo.MIN_LEVEL <= self.level <= geo.MAX_LEVEL:
            raise SceneError("bad tile level")

    @property
    def line_offsets(self) -> np.ndarray:
        k = self.lane_count
        return (np.arange(k + 1) - k / 2.0) * self.lane_width

    @property
    def surface_half_width(self) -> float:
        return self.lane_count * self.lane_width / 2.0 + SHOULDER

    # key-value config round trip

    def to_config(self) -> str:
        cp = configparser.ConfigParser()
        cp["scene"] = {
            "origin_lat": repr(self.origin.lat),
            "origin_lon": repr(self.origin.lon),
            **{
                f.name: repr(getattr(self, f.name))
                for f in fields(self)
                if f.name not in ("origin", "occlusions", "distractors")
            },
            "occlusions": "; ".join(
                f"{a!r}:{b!r}:{','.join(map(str, w)) if w else 'all'}" for a, b, w in self.occlusions
            ),
            "distractors": ",".join(sorted(self.distractors)),
        }
        from io import StringIO

        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_config(cls, text: str) -> SceneSpec:
        cp = configparser.ConfigParser()
        cp.read_string(text)
        if "scene" not in cp:
            raise SceneError("missing [scene] section")
        sec = cp["scene"]
        kwargs: dict = {}
        try:
            if "origin_lat" in sec or "origin_lon" in sec:
                kwargs["origin"] = geo.GeoPoint(sec.getfloat("origin_lat"), sec.getfloat("origin_lon"))
            for f in fields(cls):
                if f.name in ("origin", "occlusions", "distractors") or f.name not in sec:
                    continue
                conv = int if f.name in ("lane_count", "seed", "level", "map_version") else float
                kwargs[f.name] = conv(sec[f.name])
            occ = []
            for item in filter(None, (x.strip() for x in sec.get("occlusions", "").split(";"))):
                a, b, w = item.split(":")
                which = () if w.strip() == "all" else tuple(int(v) for v in w.split(","))
                occ.append((float(a), float(b), which))
            kwargs["occlusions"] = tuple(occ)
            kwargs["distractors"] = frozenset(filter(None, (x.strip() for x in sec.get("distractors", "").split(","))))
        except (ValueError, TypeError, geo.GeoDomainError) as exc:
            raise SceneError(f"bad scene config: {exc}") from None
        return cls(**kwargs)


@dataclass
class Scene:
    spec: SceneSpec
    tiles: list[tuple[str, Raster]]
    truth: RoadModel  # dashed lines as continuous chains
    surface: RoadSurface
    painted: RoadModel  # every dash as its own two-point line
    marking_length: float = 0.0  # painted and un-occluded, meters
    frame: RouteFrame | None = field(default=None, repr=False)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        for qk, r in self.tiles:
            write_tile(out / "tiles", self.spec.map_version, qk, r)
        self.truth.save(out / "truth")
        self.painted.save(out / "painted")
        (out / "surface.json").write_text(self.surface.to_json() + "\n")
        (out / "scene.ini").write_text(self.spec.to_config())
        traj = self.truth.trajectory_latlon()
        route = {
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": [[float(lon), float(lat)] for lat, lon in traj]},
            "properties": {"kind": "trajectory", "level": self.spec.level, "map_version": self.spec.map_version},
        }
        import json

        (out / "route.geojson").write_text(json.dumps(route) + "\n")


def _rng(seed: int, *names) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [zlib.crc32(str(n).encode()) for n in names]
    return np.random.default_rng(np.random.SeedSequence(key))


def _uuid(rng: np.random.Generator) -> str:
    return str(uuid.UUID(bytes=rng.bytes(16), version=4))


class _Road:
    """Analytic centreline: heading grows linearly with arc length."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.theta0 = math.radians(spec.heading)
        self.kappa = spec.curvature

    def heading(self, s):
        return self.theta0 + self.kappa * np.asarray(s, dtype=float)

    def centre(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if abs(self.kappa) < 1e-12:
            return np.stack([s * math.sin(self.theta0), s * math.cos(self.theta0)], axis=-1)
        th = self.heading(s)
        e = (math.cos(self.theta0) - np.cos(th)) / self.kappa
        n = (np.sin(th) - math.sin(self.theta0)) / self.kappa
        return np.stack([e, n], axis=-1)

    def offset(self, s, t) -> np.ndarray:
        th = self.heading(s)
        right = np.stack([np.cos(th), -np.sin(th)], axis=-1)
        return self.centre(s) + np.asarray(t, dtype=float)[..., None] * right

    def stations(self, a: float, b: float, step: float = 4.0) -> np.ndarray:
        n = max(1, math.ceil((b - a) / step))
        return np.linspace(a, b, n + 1)


def _dash_intervals(spec: SceneSpec, phase: float) -> list[tuple[float, float]]:
    period = spec.dash_length + spec.dash_gap
    out = []
    start = phase - period
    while start < spec.length:
        a, b = max(start, 0.0), min(start + spec.dash_length, spec.length)
        if b - a > 1e-6:
            out.append((a, b))
        start += period
    return out


def _occluded(spec: SceneSpec, line_index: int, s: np.ndarray) -> np.ndarray:
    mask = np.zeros(np.shape(s), dtype=bool)
    for a, b, which in spec.occlusions:
        if not which or line_index in which:
            mask |= (s >= a) & (s <= b)
    return mask


def _interval_coverage(u, a: float, b: float, h: float):
    """Fraction of the window ``[u - h, u + h]`` covered by ``[a, b]``."""
    return np.clip(np.minimum(u + h, b) - np.maximum(u - h, a), 0.0, 2 * h) / (2 * h)


def _stripe_coverage(t, centre: float, width: float, res: float):
    # box-filtered pixel coverage of a stripe, in pixel units
    return np.clip(width / (2 * res) + 0.5 - np.abs(t - centre) / res, 0.0, 1.0)


def generate_scene(spec: SceneSpec) -> Scene:
    lat_span = spec.length / 111_000.0 + 0.01
    if abs(spec.origin.lat) + lat_span > geo.MAX_MERCATOR_LAT:
        raise SceneError("road leaves the web-Mercator latitude range")
    rng = _rng(spec.seed, "scene")
    road = _Road(spec)
    origin = spec.origin
    offsets = spec.line_offsets
    k = spec.lane_count

    def to_latlon(en):
        lat, lon = geo.en_to_latlon(en, origin)
        return np.stack([lat, lon], axis=-1)

    st = road.stations(0.0, spec.length)
    traj = BoundaryLine.from_array(_uuid(rng), "trajectory", to_latlon(road.centre(st)))
    continuous, painted_lines = [], []
    phase = float(rng.uniform(0.0, spec.dash_length + spec.dash_gap))
    dashes = _dash_intervals(spec, phase)
    for j, off in enumerate(offsets):
        kind = "solid" if j in (0, k) else "dashed"
        ln = BoundaryLine.from_array(_uuid(rng), kind, to_latlon(road.offset(st, np.full_like(st, off))))
        continuous.append(ln)
        if kind == "solid":
            painted_lines.append(ln)
            continue
        for a, b in dashes:
            ds = road.stations(a, b, step=2.0)
            painted_lines.append(BoundaryLine.from_array(_uuid(rng), "dashed", to_latlon(road.offset(ds, np.full_like(ds, off)))))

    truth = chunk_road(continuous, traj, map_version=spec.map_version)
    painted = chunk_road(painted_lines, traj, map_version=spec.map_version)
    hw = spec.surface_half_width
    surface = RoadSurface(
        to_latlon(road.offset(st, np.full_like(st, -hw))),
        to_latlon(road.offset(st, np.full_like(st, hw))),
    )

    # un-occluded painted length, for bookkeeping and tests
    fine = np.linspace(0.0, spec.length, int(spec.length / 0.01) + 1)
    step = fine[1] - fine[0]
    in_dash = np.zeros_like(fine, dtype=bool)
    for a, b in dashes:
        in_dash |= (fine >= a) & (fine <= b)
    marking_length = 0.0
    for j in range(k + 1):
        painted_here = np.ones_like(in_dash) if j in (0, k) else in_dash
        marking_length += float(np.sum(painted_here & ~_occluded(spec, j, fine)) * step)

    frame = RouteFrame(to_latlon(road.centre(road.stations(0.0, spec.length, step=1.0))), origin=origin)
    tiles = _render_tiles(spec, road, frame, offsets, dashes)
    return Scene(spec, tiles, truth, surface, painted, marking_length, frame)


def _scene_tiles(spec: SceneSpec, road: _Road, reach: float) -> list[tuple[int, int]]:
    s = np.arange(0.0, spec.length + 1.0, 1.0)
    t = np.arange(-reach, reach + 1.0, 1.0)
    ss, tt = np.meshgrid(s, t)
    en = road.offset(ss.ravel(), tt.ravel())
    lat, lon = geo.en_to_latlon(en, spec.origin)
    x, y = geo.latlon_to_pixel_arr(lat, lon, spec.level)
    # Grow each sample by the grid spacing so tile corners between samples are not missed.
    pad = 1.0 / geo.ground_resolution(spec.origin.lat, spec.level)
    cells = set()
    for dx in (-pad, pad):
        for dy in (-pad, pad):
            c = np.stack([np.floor((x + dx) / 256), np.floor((y + dy) / 256)], axis=-1).astype(np.int64)
            cells.update(map(tuple, np.unique(c, axis=0).tolist()))
    return sorted((int(a), int(b)) for a, b in cells)


def pixel_st(frame: RouteFrame, x0: int, y0: int, w: int, h: int, level: int, step: int = 8):
    """Route coordinates of the centres of a ``h x w`` block of global pixels.

    Station and offset are smooth over a tile, so they are evaluated exactly
    on a ``step``-pixel lattice and interpolated bilinearly in between.
    """
    nx, ny = -(-(w - 1) // step) + 1, -(-(h - 1) // step) + 1
    gx, gy = np.meshgrid(x0 + 0.5 + step * np.arange(nx), y0 + 0.5 + step * np.arange(ny))
    lat, lon = geo.pixel_to_latlon_arr(gx, gy, level)
    s, t = frame.to_st(geo.latlon_to_en(lat, lon, frame.origin))
    rows, cols = np.meshgrid(np.arange(h) / step, np.arange(w) / step, indexing="ij")
    coords = np.stack([rows, cols])
    return (
        map_coordinates(s, coords, order=1, mode="nearest"),
        map_coordinates(t, coords, order=1, mode="nearest"),
    )


def _render_tiles(spec, road, frame, offsets, dashes) -> list[tuple[str, Raster]]:
    hw = spec.surface_half_width
    # imagery extends past the verge so a default extraction corridor stays covered
    reach = max(hw + (GUARDRAIL_GAP + 2.0 if spec.distractors else 2.0), MIN_IMAGERY_REACH)
    margin = int(math.ceil(4 * spec.blur_sigma)) + 2
    ts = geo.TILE_SIZE
    res = geo.ground_resolution(spec.origin.lat, spec.level)
    period = spec.dash_length + spec.dash_gap
    out = []
    for tx, ty in _scene_tiles(spec, road, reach):
        x0, y0 = tx * ts - margin, ty * ts - margin
        size = ts + 2 * margin
        s, t = pixel_st(frame, x0, y0, size, size, spec.level)
        on_road = _interval_coverage(s, 0.0, spec.length, res / 2)
        img = np.empty((size, size, 3))
        img[:] = VERGE

        def paint(coverage, colour):
            img[...] = img * (1 - coverage[..., None]) + np.asarray(colour) * coverage[..., None]

        paint(_stripe_coverage(t, 0.0, 2 * hw, res) * on_road, ASPHALT)
        if "curb" in spec.distractors:
            for side in (-1, 1):
                paint(_stripe_coverage(t, side * (hw + CURB_GAP), CURB_WIDTH, res) * on_road, CURB)
        if "guardrail" in spec.distractors:
            for side in (-1, 1):
                paint(_stripe_coverage(t, side * (hw + GUARDRAIL_GAP), GUARDRAIL_WIDTH, res) * on_road, GUARDRAIL)
        k = len(offsets) - 1
        for j, off in enumerate(offsets):
            cov = _stripe_coverage(t, off, spec.marking_width, res)
            if not cov.any():
                continue
            if j in (0, k):
                along = on_road
            else:
                along = np.zeros_like(s)
                for a, b in dashes:
                    if b < s.min() - 1 or a > s.max() + 1:
                        continue
                    along += _interval_coverage(s, a, b, res / 2)
                along = np.minimum(along, 1.0)
            occ = _occluded(spec, j, s)
            paint(cov * along * ~occ, PAINT)
        if spec.blur_sigma > 0:
            for c in range(3):
                img[..., c] = gaussian_filter(img[..., c], spec.blur_sigma, mode="nearest")
        img = img[margin:-margin, margin:-margin]
        if spec.noise_sigma > 0:
            noise = _rng(spec.seed, "noise", tx, ty).normal(0.0, spec.noise_sigma, size=img.shape[:2])
            img = img + noise[..., None]
        pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        out.append((geo.tile_quadkey(tx, ty, spec.level), Raster(pixels, (tx, ty, spec.level))))
    return out


# -- occlusion ---------------------------------------------------------------------


def _marking_samples(model: RoadModel, frame: RouteFrame, step: float = 0.1):
    pts = []
    for c in model.chunks:
        for ln in c.boundaries:
            en = frame.to_en(ln.latlon())
            seg = np.diff(en, axis=0)
            lens = np.hypot(seg[:, 0], seg[:, 1])
            cum = np.concatenate([[0.0], np.cumsum(lens)])
            d = np.arange(step / 2, cum[-1], step)
            idx = np.clip(np.searchsorted(cum, d, side="right") - 1, 0, len(lens) - 1)
            pts.append(en[idx] + ((d - cum[idx]) / lens[idx])[:, None] * seg[idx])
    if not pts:
        return np.empty(0), np.empty(0)
    return frame.to_st(np.concatenate(pts))


def occlusion_blobs(truth: RoadModel, occlusion_fraction: float, seed: int, frame: RouteFrame | None = None):
    """Vehicle-like rectangles ``(s_centre, t_centre, length, width, intensity)``
    that together cover ``occlusion_fraction`` of the painted marking length.

    Returns the blobs and the fraction of marking samples they cover.
    """
    if not 0.0 <= occlusion_fraction < 1.0:
        raise ValueError("occlusion_fraction must be in [0, 1)")
    if frame is None:
        frame = RouteFrame(truth.trajectory_latlon())
    s, t = _marking_samples(truth, frame)
    covered = np.zeros(len(s), dtype=bool)
    target = occlusion_fraction * len(s)
    rng = _rng(seed, "occlusion")
    blobs = []
    while covered.sum() < target:
        i = int(rng.choice(np.flatnonzero(~covered)))
        length = float(rng.uniform(4.0, 12.0))
        width = float(rng.uniform(1.6, 2.4))
        sc = float(s[i] + rng.uniform(-length / 3, length / 3))
        tc = float(t[i] + rng.uniform(-0.4, 0.4))
        shade = float(rng.uniform(30.0, 170.0))
        blobs.append((sc, tc, length, width, shade))
        covered |= (np.abs(s - sc) <= length / 2) & (np.abs(t - tc) <= width / 2)
    frac = float(covered.mean()) if len(s) else 0.0
    return blobs, frac


def blob_polygons_px(blobs, frame: RouteFrame, level: int) -> list[tuple[np.ndarray, float]]:
    out = []
    for sc, tc, length, width, shade in blobs:
        ss = np.linspace(sc - length / 2, sc + length / 2, 5)
        left = frame.from_st(ss, np.full_like(ss, tc - width / 2))
        right = frame.from_st(ss, np.full_like(ss, tc + width / 2))
        ring = np.concatenate([left, right[::-1]])
        lat, lon = geo.en_to_latlon(ring, frame.origin)
        x, y = geo.latlon_to_pixel_arr(lat, lon, level)
        out.append((np.stack([x, y], axis=-1), shade))
    return out


def corrupt(tiles, truth: RoadModel, occlusion_fraction: float, seed: int) -> list[tuple[str, Raster]]:
    """Paint opaque vehicle-like blobs on the road covering the requested
    fraction of the marking length of ``truth``.

    ``truth`` should list the painted markings (dashes as separate lines) so
    that coverage is measured against paint actually on the road.
    """
    if occlusion_fraction == 0:
        return list(tiles)
    frame = RouteFrame(truth.trajectory_latlon())
    blobs, _ = occlusion_blobs(truth, occlusion_fraction, seed, frame)
    if not tiles:
        return []
    level = tiles[0][1].georef[2]
    polys = blob_polygons_px(blobs, frame, level)
    rng = _rng(seed, "occlusion-noise")
    out = []
    ts = geo.TILE_SIZE
    for qk, r in tiles:
        tx, ty, _ = r.georef
        x0, y0 = tx * ts, ty * ts
        hits = [
            (p, shade)
            for p, shade in polys
            if p[:, 0].max() >= x0 and p[:, 0].min() < x0 + ts and p[:, 1].max() >= y0 and p[:, 1].min() < y0 + ts
        ]
        if not hits:
            out.append((qk, r))
            continue
        mask_img = Image.new("L", (r.width, r.height), 0)
        shade_img = Image.new("L", (r.width, r.height), 0)
        dm, ds = ImageDraw.Draw(mask_img), ImageDraw.Draw(shade_img)
        for p, shade in hits:
            local = [(float(x - x0 - 0.5), float(y - y0 - 0.5)) for x, y in p]
            dm.polygon(local, fill=255)
            ds.polygon(local, fill=int(round(shade)))
        mask = np.asarray(mask_img) > 0
        shade = np.asarray(shade_img, dtype=float)
        noise = rng.normal(0.0, 3.0, size=shade.shape)
        pix = r.pixels.astype(float).copy()
        fill = np.clip(np.rint(shade + noise), 0, 255)
        if pix.ndim == 3:
            pix[mask] = fill[mask][:, None]
        else:
            pix[mask] = fill[mask]
        out.append((qk, Raster(pix.astype(np.uint8), r.georef)))
    return out


def blob_mask_for_tile(blobs, frame: RouteFrame, tile: Raster) -> np.ndarray:
    tx, ty, level = tile.georef
    img = Image.new("L", (tile.width, tile.height), 0)
    d = ImageDraw.Draw(img)
    for p, _ in blob_polygons_px(blobs, frame, level):
        d.polygon([(float(x - tx * 256 - 0.5), float(y - ty * 256 - 0.5)) for x, y in p], fill=1)
    return np.asarray(img, dtype=bool)


def truth_line_lengths(model: RoadModel) -> float:
    frame = RouteFrame(model.trajectory_latlon())
    return sum(polyline_length(frame.to_en(ln.latlon())) for c in model.chunks for ln in c.boundaries)
