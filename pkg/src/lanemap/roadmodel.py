"""Chunked, function-labeled lane-boundary model.

A road is a sequence of fixed-length chunks cut along the trajectory. Each
chunk holds the trajectory piece plus every boundary-line fragment falling in
it, and is stored as one JSON document::

    {"id": 0, "map version": 1,
     "lines": [{"line id": "<uuid>", "type": "solid", "points": [[lat, lon], ...]}]}

A whole model on disk is a directory of ``chunk_<id>.json`` files plus a
``road.json`` index listing the chunk ids in route order.
"""

from __future__ import annotations

import json
import math
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy.spatial import cKDTree

from . import geo

if TYPE_CHECKING:
    from .tiles import Raster

KINDS = ("solid", "dashed", "trajectory")
DEFAULT_CHUNK_LENGTH = 12.0
COORD_DECIMALS = 12  # 1e-12 deg is about 0.1 um on the ground


class ChunkParseError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class BoundaryLine:
    line_id: str
    kind: str
    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"bad line kind {self.kind!r}")
        object.__setattr__(self, "line_id", str(uuid.UUID(self.line_id)))
        # Quantised to the serialised precision so JSON round trips are exact.
        pts = tuple((round(float(a), COORD_DECIMALS), round(float(b), COORD_DECIMALS)) for a, b in self.points)
        if len(pts) < 2:
            raise ValueError("a line needs at least two points")
        for a, b in zip(pts, pts[1:]):
            if a == b:
                raise ValueError("repeated consecutive point")
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_array(cls, line_id: str, kind: str, latlon) -> BoundaryLine:
        return cls(line_id, kind, tuple(map(tuple, np.asarray(latlon, dtype=float))))

    def latlon(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float)


@dataclass(frozen=True)
class Chunk:
    id: int
    map_version: int
    lines: tuple[BoundaryLine, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(self.lines))

    @property
    def trajectory(self) -> BoundaryLine:
        trajs = [ln for ln in self.lines if ln.kind == "trajectory"]
        if len(trajs) != 1:
            raise ValueError(f"chunk {self.id} has {len(trajs)} trajectory lines")
        return trajs[0]

    @property
    def boundaries(self) -> list[BoundaryLine]:
        return [ln for ln in self.lines if ln.kind != "trajectory"]


@dataclass(frozen=True)
class RoadModel:
    chunks: tuple[Chunk, ...]
    chunk_length: float = DEFAULT_CHUNK_LENGTH

    def __post_init__(self):
        object.__setattr__(self, "chunks", tuple(self.chunks))
        ids = [c.id for c in self.chunks]
        if len(set(ids)) != len(ids):
            raise ValueError("chunk ids must be unique")
        for c in self.chunks:
            c.trajectory  # noqa: B018 - validates exactly one trajectory

    def trajectory_latlon(self) -> np.ndarray:
        """Whole trajectory, chunk pieces joined with shared endpoints merged."""
        parts = []
        for i, c in enumerate(self.chunks):
            pts = c.trajectory.latlon()
            parts.append(pts if i == 0 else pts[1:])
        return np.concatenate(parts) if parts else np.empty((0, 2))

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for c in self.chunks:
            (d / f"chunk_{c.id}.json").write_bytes(serialize_chunk_json(c))
        index = {"chunk length": self.chunk_length, "chunks": [c.id for c in self.chunks]}
        (d / "road.json").write_text(json.dumps(index, indent=2) + "\n")

    @classmethod
    def load(cls, directory) -> RoadModel:
        d = Path(directory)
        index = json.loads((d / "road.json").read_text())
        chunks = [parse_chunk_json((d / f"chunk_{i}.json").read_bytes()) for i in index["chunks"]]
        return cls(tuple(chunks), float(index.get("chunk length", DEFAULT_CHUNK_LENGTH)))

    def to_geojson(self) -> dict:
        features = []
        for c in self.chunks:
            for ln in c.lines:
                features.append(
                    {
                        "type": "Feature",
                        "geometry": {"type": "LineString", "coordinates": [[lon, lat] for lat, lon in ln.points]},
                        "properties": {"kind": ln.kind, "line_id": ln.line_id, "chunk_id": c.id},
                    }
                )
        return {"type": "FeatureCollection", "features": features}


@dataclass(frozen=True)
class RoadSurface:
    left_boundary: np.ndarray = field(repr=False)
    right_boundary: np.ndarray = field(repr=False)

    def polygon_latlon(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.left_boundary), np.asarray(self.right_boundary)[::-1]])

    def to_json(self) -> str:
        def fmt(a):
            return [[round(float(lat), COORD_DECIMALS), round(float(lon), COORD_DECIMALS)] for lat, lon in a]

        return json.dumps({"left_boundary": fmt(self.left_boundary), "right_boundary": fmt(self.right_boundary)})

    @classmethod
    def from_json(cls, text) -> RoadSurface:
        d = json.loads(text)
        return cls(np.asarray(d["left_boundary"], dtype=float), np.asarray(d["right_boundary"], dtype=float))


# -- JSON ----------------------------------------------------------------------


def _fmt(v: float) -> str:
    s = f"{v:.{COORD_DECIMALS}f}"
    return "0." + "0" * COORD_DECIMALS if s == "-0." + "0" * COORD_DECIMALS else s


def serialize_chunk_json(c: Chunk) -> bytes:
    """Deterministic JSON for one chunk (fixed key order, fixed float format)."""
    out = ["{", f'  "id": {int(c.id)},', f'  "map version": {int(c.map_version)},']
    if not c.lines:
        out.append('  "lines": []')
    else:
        out.append('  "lines": [')
        for i, ln in enumerate(c.lines):
            pts = ",\n".join(f"        [{_fmt(lat)}, {_fmt(lon)}]" for lat, lon in ln.points)
            out += [
                "    {",
                f'      "line id": {json.dumps(ln.line_id)},',
                f'      "type": {json.dumps(ln.kind)},',
                '      "points": [',
                pts,
                "      ]",
                "    }" + ("," if i < len(c.lines) - 1 else ""),
            ]
        out.append("  ]")
    out.append("}")
    return ("\n".join(out) + "\n").encode("utf-8")


def _require(d: dict, key: str, path: str):
    if not isinstance(d, dict):
        raise ChunkParseError(path, "expected an object")
    if key not in d:
        raise ChunkParseError(f"{path}.{key}" if path else key, "missing field")
    return d[key]


def _int_field(d, key, path):
    v = _require(d, key, path)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ChunkParseError(key, f"expected integer, got {v!r}")
    return v


def parse_chunk_json(text) -> Chunk:
    if isinstance(text, (bytes, bytearray)):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ChunkParseError("", f"not UTF-8: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ChunkParseError("", f"invalid JSON: {exc}") from None
    cid = _int_field(doc, "id", "")
    version = _int_field(doc, "map version", "")
    raw_lines = _require(doc, "lines", "")
    if not isinstance(raw_lines, list):
        raise ChunkParseError("lines", "expected an array")
    lines = []
    for i, raw in enumerate(raw_lines):
        path = f"lines[{i}]"
        line_id = _require(raw, "line id", path)
        kind = _require(raw, "type", path)
        pts = _require(raw, "points", path)
        try:
            if not isinstance(line_id, str):
                raise ValueError
            line_id = str(uuid.UUID(line_id))
        except ValueError:
            raise ChunkParseError(f"{path}.line id", f"malformed UUID {line_id!r}") from None
        if kind not in KINDS:
            raise ChunkParseError(f"{path}.type", f"expected one of {KINDS}, got {kind!r}")
        if not isinstance(pts, list) or len(pts) < 2:
            raise ChunkParseError(f"{path}.points", "need at least 2 points")
        parsed = []
        for j, p in enumerate(pts):
            if (
                not isinstance(p, list)
                or len(p) != 2
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in p)
            ):
                raise ChunkParseError(f"{path}.points[{j}]", "expected [latitude, longitude]")
            lat, lon = float(p[0]), float(p[1])
            if not (-90 <= lat <= 90 and -180 <= lon <= 180):
                raise ChunkParseError(f"{path}.points[{j}]", "coordinate out of range")
            parsed.append((lat, lon))
        try:
            lines.append(BoundaryLine(line_id, kind, tuple(parsed)))
        except ValueError as exc:
            raise ChunkParseError(f"{path}.points", str(exc)) from None
    return Chunk(cid, version, tuple(lines))


def same_geometry(a: Chunk, b: Chunk, tol_deg: float = 1e-9) -> bool:
    """Chunk equality ignoring ``map_version`` and up to a coordinate tolerance."""
    if a.id != b.id or len(a.lines) != len(b.lines):
        return False
    for la, lb in zip(a.lines, b.lines):
        if la.line_id != lb.line_id or la.kind != lb.kind or len(la.points) != len(lb.points):
            return False
        if np.max(np.abs(la.latlon() - lb.latlon())) > tol_deg:
            return False
    return True


# -- route frame -----------------------------------------------------------------


class RouteFrame:
    """Station/offset coordinates along a trajectory in a local tangent plane.

    ``s`` is arc length from the first trajectory point and ``t`` the signed
    perpendicular distance, positive to the right of the travel direction.
    Stations outside ``[0, length]`` extrapolate the end segments.
    """

    def __init__(self, latlon, origin: geo.GeoPoint | None = None):
        latlon = np.asarray(latlon, dtype=float)
        if origin is None:
            origin = geo.GeoPoint(float(latlon[0, 0]), float(latlon[0, 1]))
        self.origin = origin
        en = geo.latlon_to_en(latlon[:, 0], latlon[:, 1], origin)
        keep = np.concatenate([[True], np.any(np.abs(np.diff(en, axis=0)) > 1e-9, axis=1)])
        en = en[keep]
        if len(en) < 2:
            raise ValueError("degenerate trajectory: fewer than two distinct points")
        self.latlon = latlon[keep]
        self.en = en
        seg = np.diff(en, axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.seg_dir = seg / self.seg_len[:, None]
        self.stations = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.stations[-1])
        self._dense_s = np.unique(
            np.concatenate([self.stations, np.arange(0.0, self.length, 1.0)])
        )
        self._dense_xy = self._position(self._dense_s)
        self._tree = cKDTree(self._dense_xy)

    def _segment_index(self, s) -> np.ndarray:
        return np.clip(np.searchsorted(self.stations, s, side="right") - 1, 0, len(self.seg_len) - 1)

    def _position(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        k = self._segment_index(s)
        return self.en[k] + (s - self.stations[k])[..., None] * self.seg_dir[k]

    def direction(self, s) -> np.ndarray:
        return self.seg_dir[self._segment_index(np.asarray(s, dtype=float))]

    def from_st(self, s, t) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        d = self.direction(s)
        right = np.stack([d[..., 1], -d[..., 0]], axis=-1)
        return self._position(s) + t[..., None] * right

    def to_st(self, en):
        """Project ``(..., 2)`` east/north points; returns ``(s, t)`` arrays."""
        en = np.asarray(en, dtype=float)
        shape = en.shape[:-1]
        p = en.reshape(-1, 2)
        _, nearest = self._tree.query(p)
        k0 = self._segment_index(self._dense_s[nearest])
        nseg = len(self.seg_len)
        # The foot lies on the segment holding the nearest dense sample or on a neighbour.
        k = np.clip(k0[:, None] + np.array([-1, 0, 1]), 0, nseg - 1)
        start = self.en[k]
        d = self.seg_dir[k]
        rel = p[:, None, :] - start
        u = rel[..., 0] * d[..., 0] + rel[..., 1] * d[..., 1]
        lo = np.where(k == 0, -np.inf, 0.0)
        hi = np.where(k == nseg - 1, np.inf, self.seg_len[k])
        u = np.clip(u, lo, hi)
        wx = rel[..., 0] - u * d[..., 0]
        wy = rel[..., 1] - u * d[..., 1]
        dist2 = wx * wx + wy * wy
        best = np.argmin(dist2, axis=1)
        rows = np.arange(len(p))
        kb = k[rows, best]
        s = self.stations[kb] + u[rows, best]
        # Right of travel is positive; a positive cross product means left.
        cross = d[rows, best, 0] * wy[rows, best] - d[rows, best, 1] * wx[rows, best]
        t = np.sqrt(dist2[rows, best]) * np.where(cross > 0, -1.0, 1.0)
        return s.reshape(shape), t.reshape(shape)

    def latlon_to_st(self, latlon):
        latlon = np.asarray(latlon, dtype=float)
        return self.to_st(geo.latlon_to_en(latlon[..., 0], latlon[..., 1], self.origin))

    def st_to_latlon(self, s, t) -> np.ndarray:
        lat, lon = geo.en_to_latlon(self.from_st(s, t), self.origin)
        return np.stack([lat, lon], axis=-1)

    def to_latlon(self, en) -> np.ndarray:
        lat, lon = geo.en_to_latlon(en, self.origin)
        return np.stack([lat, lon], axis=-1)

    def to_en(self, latlon) -> np.ndarray:
        latlon = np.asarray(latlon, dtype=float)
        return geo.latlon_to_en(latlon[..., 0], latlon[..., 1], self.origin)


def polyline_length(en) -> float:
    en = np.asarray(en, dtype=float)
    return float(np.sum(np.hypot(*np.diff(en, axis=0).T)))


# -- chunking --------------------------------------------------------------------


def _dedupe(latlon: list[tuple[float, float]]) -> list[tuple[float, float]]:
    out: list[tuple[float, float]] = []
    for p in latlon:
        p = (round(p[0], COORD_DECIMALS), round(p[1], COORD_DECIMALS))
        if not out or p != out[-1]:
            out.append(p)
    return out


def _clip_by_station(latlon, en, s, lo: float, hi: float, frame: RouteFrame) -> list[list[tuple[float, float]]]:
    """Pieces of a polyline whose stations fall in ``[lo, hi]``.

    Vertices inside keep their original coordinates; border crossings are
    linearly interpolated in the plane, so neighbouring chunks share them
    exactly.
    """
    eps = 1e-6  # vertices this close to a border count as on it
    inside = (s >= lo - eps) & (s <= hi + eps)
    pieces: list[list[tuple[float, float]]] = []
    cur: list[tuple[float, float]] = []
    for i in range(len(s)):
        if inside[i]:
            cur.append((float(latlon[i, 0]), float(latlon[i, 1])))
        elif cur:
            pieces.append(cur)
            cur = []
        if i == len(s) - 1:
            break
        a, b = s[i], s[i + 1]
        crossings = sorted(
            ((bd - a) / (b - a), bd)
            for bd in (lo, hi)
            if (a - bd) * (b - bd) < 0 and abs(a - bd) > eps and abs(b - bd) > eps
        )
        state = bool(inside[i])
        for f, _ in crossings:
            lat, lon = geo.en_to_latlon(en[i] + f * (en[i + 1] - en[i]), frame.origin)
            pt = (float(lat), float(lon))
            if state:
                cur.append(pt)
                pieces.append(cur)
                cur = []
            else:
                cur = [pt]
            state = not state
    if cur:
        pieces.append(cur)
    pieces = [_drop_near_ends(_dedupe(p), frame) for p in pieces]
    return [p for p in pieces if len(p) >= 2]


def _drop_near_ends(pts: list[tuple[float, float]], frame: RouteFrame, tol: float = 1e-4):
    """Remove interior vertices within ``tol`` metres of either end point.

    A vertex that sits on a chunk border up to rounding otherwise survives
    next to the interpolated border point as a sub-micrometre segment.
    """
    if len(pts) <= 2:
        return pts
    en = frame.to_en(np.array(pts))
    near = (np.hypot(*(en - en[0]).T) < tol) | (np.hypot(*(en - en[-1]).T) < tol)
    near[0] = near[-1] = False
    out = [p for p, n in zip(pts, near) if not n]
    if len(out) == 2 and np.hypot(*(en[-1] - en[0])) < tol:
        return out[:1]
    return out


def chunk_count(total: float, chunk_length: float) -> int:
    """Number of chunks for a route of ``total`` metres.

    A remainder below 0.1 mm is coordinate rounding noise and is absorbed by
    the last chunk rather than becoming a chunk of its own.
    """
    return max(1, math.ceil((total - 1e-4) / chunk_length))


def chunk_road(
    lines: Sequence[BoundaryLine],
    trajectory: BoundaryLine,
    chunk_length: float = DEFAULT_CHUNK_LENGTH,
    map_version: int = 0,
) -> RoadModel:
    """Cut ``trajectory`` into ``chunk_length`` pieces by arc length and split
    every boundary line at the chunk borders. Fragments keep their line id."""
    if chunk_length <= 0:
        raise ValueError("chunk_length must be positive")
    frame = RouteFrame(trajectory.latlon())
    total = frame.length
    n = chunk_count(total, chunk_length)
    borders = [k * chunk_length for k in range(n)] + [total]

    prepared = []
    for ln in lines:
        ll = ln.latlon()
        en = frame.to_en(ll)
        s, _ = frame.to_st(en)
        if s[-1] < s[0]:
            ll, en, s = ll[::-1], en[::-1], s[::-1]
        prepared.append((ln, ll, en, s))

    tll, ten, ts = frame.latlon, frame.en, frame.stations
    chunks = []
    for k in range(n):
        lo, hi = borders[k], borders[k + 1]
        traj_pieces = _clip_by_station(tll, ten, ts, lo, hi, frame)
        traj_pts = traj_pieces[0] if len(traj_pieces) == 1 else _dedupe(sum(traj_pieces, []))
        chunk_lines = [BoundaryLine(trajectory.line_id, "trajectory", tuple(traj_pts))]
        for ln, ll, en, s in prepared:
            for piece in _clip_by_station(ll, en, s, lo, hi, frame):
                chunk_lines.append(BoundaryLine(ln.line_id, ln.kind, tuple(piece)))
        chunks.append(Chunk(k, map_version, tuple(chunk_lines)))
    return RoadModel(tuple(chunks), chunk_length)


def merge_dashed_fragments(lines: Iterable[BoundaryLine], frame: RouteFrame, max_gap: float = 15.0,
                           max_lateral: float = 0.5) -> list[BoundaryLine]:
    """Join isolated dashed segments into continuous chains.

    Fragments are chained in station order when the along-route gap is below
    ``max_gap`` meters and their lateral offsets agree within ``max_lateral``.
    Other kinds pass through unchanged. The chain takes the first fragment's id.
    """
    out = []
    dashed = []
    for ln in lines:
        if ln.kind != "dashed":
            out.append(ln)
            continue
        s, t = frame.latlon_to_st(ln.latlon())
        order = np.argsort(s)
        dashed.append((float(s[order[0]]), float(s[order[-1]]), float(np.mean(t)), ln.latlon()[order], ln.line_id))
    chains: list[list] = []
    for item in sorted(dashed, key=lambda d: d[0]):
        for ch in chains:
            last = ch[-1]
            if abs(last[2] - item[2]) <= max_lateral and 0 <= item[0] - last[1] < max_gap:
                ch.append(item)
                break
        else:
            chains.append([item])
    for ch in chains:
        pts = _dedupe([tuple(p) for item in ch for p in item[3]])
        out.append(BoundaryLine(ch[0][4], "dashed", tuple(pts)))
    return out


# -- projection and masks ----------------------------------------------------------


def project_chunk_to_pixels(c: Chunk, level: int) -> list[tuple[BoundaryLine, np.ndarray]]:
    """Global pixel polylines ``(n, 2)`` of ``x, y`` for every line of the chunk."""
    out = []
    for ln in c.lines:
        ll = ln.latlon()
        x, y = geo.latlon_to_pixel_arr(ll[:, 0], ll[:, 1], level)
        out.append((ln, np.stack([x, y], axis=-1)))
    return out


def _tile_local(xy: np.ndarray, tile_x: int, tile_y: int) -> list[tuple[float, float]]:
    # PIL addresses pixel j at coordinate j, i.e. at its centre j + 0.5 in global terms.
    ox = tile_x * geo.TILE_SIZE + 0.5
    oy = tile_y * geo.TILE_SIZE + 0.5
    return [(float(x - ox), float(y - oy)) for x, y in xy]


def surface_mask_for(surface: RoadSurface, tile: Raster) -> np.ndarray:
    tx, ty, level = tile.georef
    poly = surface.polygon_latlon()
    x, y = geo.latlon_to_pixel_arr(poly[:, 0], poly[:, 1], level)
    img = Image.new("L", (tile.width, tile.height), 0)
    ImageDraw.Draw(img).polygon(_tile_local(np.stack([x, y], axis=-1), tx, ty), fill=1, outline=1)
    return np.asarray(img, dtype=bool)


def marking_mask_for(c: Chunk, tile: Raster, level: int | None = None) -> np.ndarray:
    tx, ty, lvl = tile.georef
    level = lvl if level is None else level
    img = Image.new("L", (tile.width, tile.height), 0)
    draw = ImageDraw.Draw(img)
    for ln, xy in project_chunk_to_pixels(c, level):
        if ln.kind == "trajectory":
            continue
        draw.line(_tile_local(xy, tx, ty), fill=1, width=1)
    return np.asarray(img, dtype=bool)


def rasterize_masks(c: Chunk, surface: RoadSurface, tile: Raster, level: int | None = None):
    """``(surface_mask, marking_mask)`` boolean arrays shaped like ``tile``.

    Marking lines are drawn one pixel wide; chunks outside the tile simply
    produce empty masks.
    """
    return surface_mask_for(surface, tile), marking_mask_for(c, tile, level)


def rasterize_model_masks(model: RoadModel, surface: RoadSurface, tile: Raster):
    """Masks for every chunk of ``model`` OR-ed together on one tile."""
    surface_mask = surface_mask_for(surface, tile)
    marking = np.zeros_like(surface_mask)
    tx, ty, level = tile.georef
    x0, y0 = tx * geo.TILE_SIZE, ty * geo.TILE_SIZE
    for c in model.chunks:
        ll = np.concatenate([ln.latlon() for ln in c.lines])
        x, y = geo.latlon_to_pixel_arr(ll[:, 0], ll[:, 1], level)
        if x.max() < x0 - 2 or x.min() > x0 + tile.width + 2 or y.max() < y0 - 2 or y.min() > y0 + tile.height + 2:
            continue
        marking |= marking_mask_for(c, tile)
    return surface_mask, marking
