"""End-to-end extraction: tiles and a trajectory in, a lane model out."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from . import classify, geo, link, segment
from .roadmodel import BoundaryLine, RoadModel, RoadSurface, RouteFrame
from .tiles import Canvas, Raster

log = logging.getLogger(__name__)


@dataclass
class ExtractionResult:
    model: RoadModel
    prob_map: classify.ProbabilityMap
    segments: dict[int, list[segment.LineSegmentCandidate]]
    groups: list[link.LineGroup]
    partition: link.ChunkPartition
    peaks: list[segment.PeakPoint] = field(default_factory=list)


def corridor_surface(trajectory: BoundaryLine, half_width: float) -> RoadSurface:
    """Band of ``half_width`` metres either side of the trajectory."""
    frame = RouteFrame(trajectory.latlon())
    s = np.unique(np.concatenate([frame.stations, np.arange(0.0, frame.length, 2.0)]))
    return RoadSurface(frame.st_to_latlon(s, np.full_like(s, -half_width)), frame.st_to_latlon(s, np.full_like(s, half_width)))


def polygon_mask(poly_xy: np.ndarray, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    img = Image.new("L", (w, h), 0)
    pts = [(float(x - x0 - 0.5), float(y - y0 - 0.5)) for x, y in poly_xy]
    ImageDraw.Draw(img).polygon(pts, fill=1, outline=1)
    return np.asarray(img, dtype=bool)


def _first_center(origin: int, offset: int, stride: int) -> int:
    return origin + (offset - origin) % stride


def route_probability_map(canvas: Canvas, surface: RoadSurface, model: classify.ForestModel, stride: int = 4,
                          jobs: int = 1) -> classify.ProbabilityMap:
    """Probability map on one global grid of patch centres over all loaded tiles.

    Centres sit at ``patch_size // 2`` modulo ``stride`` in global pixels, so
    the grid is identical to the per-tile grid of training patches.
    """
    size = model.patch_size
    ts = geo.TILE_SIZE
    off = (size // 2) % stride
    keys = sorted(canvas.tiles)
    txs = [k[0] for k in keys]
    tys = [k[1] for k in keys]
    gx0 = _first_center(min(txs) * ts, off, stride)
    gy0 = _first_center(min(tys) * ts, off, stride)
    ncols = (max(txs) * ts + ts - 1 - gx0) // stride + 1
    nrows = (max(tys) * ts + ts - 1 - gy0) // stride + 1
    values = np.zeros((nrows, ncols), dtype=np.float64)
    poly = surface.polygon_latlon()
    px, py = geo.latlon_to_pixel_arr(poly[:, 0], poly[:, 1], canvas.level)
    poly_xy = np.stack([px, py], axis=-1)

    def work(key):
        tx, ty = key
        cx0 = _first_center(tx * ts, off, stride)
        cy0 = _first_center(ty * ts, off, stride)
        nx = (tx * ts + ts - 1 - cx0) // stride + 1
        ny = (ty * ts + ts - 1 - cy0) // stride + 1
        wx0, wy0 = cx0 - size // 2, cy0 - size // 2
        w, h = (nx - 1) * stride + size, (ny - 1) * stride + size
        if px.max() < wx0 or px.min() > wx0 + w or py.max() < wy0 or py.min() > wy0 + h:
            return None
        surf = polygon_mask(poly_xy, wx0, wy0, w, h)
        if not surf.any():
            return None
        img = np.clip(np.rint(canvas.window(wx0, wy0, w, h)), 0, 255).astype(np.uint8)
        patches, rows, cols, _ = classify.patch_grid(img, surf, size, stride)
        if not len(rows):
            return None
        p = classify.predict_proba_batch(model, classify.features_batch(patches, model.feature_kind))
        r = (cy0 - gy0) // stride + rows // stride
        c = (cx0 - gx0) // stride + cols // stride
        return r, c, p

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(work, keys))
    else:
        results = [work(k) for k in keys]
    for res in results:  # ordered reduction
        if res is not None:
            values[res[0], res[1]] = res[2]
    return classify.ProbabilityMap(values, gx0, gy0, stride, canvas.level, size)


def _px_to_en(xy: np.ndarray, level: int, frame: RouteFrame) -> np.ndarray:
    lat, lon = geo.pixel_to_latlon_arr(xy[..., 0], xy[..., 1], level)
    return geo.latlon_to_en(lat, lon, frame.origin)


def _chunk_directions(partition: link.ChunkPartition, level: int) -> np.ndarray:
    """Unit travel direction of every chunk in global pixel axes."""
    frame = partition.frame
    mids = np.array([0.5 * sum(partition.bounds(k)) for k in range(partition.n_chunks)])
    a = frame.st_to_latlon(mids - 1.0, np.zeros_like(mids))
    b = frame.st_to_latlon(mids + 1.0, np.zeros_like(mids))
    xa, ya = geo.latlon_to_pixel_arr(a[:, 0], a[:, 1], level)
    xb, yb = geo.latlon_to_pixel_arr(b[:, 0], b[:, 1], level)
    d = np.stack([xb - xa, yb - ya], axis=-1)
    return d / np.hypot(d[:, 0], d[:, 1])[:, None]


def segment_route(pm: classify.ProbabilityMap, canvas: Canvas, partition: link.ChunkPartition,
                  cfg: segment.SegmentConfig | None = None):
    """Line segments per chunk, plus every peak found."""
    cfg = cfg or segment.SegmentConfig()
    frame = partition.frame
    level = pm.level
    dirs = _chunk_directions(partition, level)
    regions = segment.extract_regions(pm, cfg.threshold, cfg.min_cells)
    by_chunk: dict[int, list[segment.LineSegmentCandidate]] = {}
    all_peaks = []
    for reg in regions:
        s, _ = frame.to_st(_px_to_en(reg.centers, level, frame))
        cid = partition.chunk_of(s)
        for k in np.unique(cid):
            piece = reg.subset(cid == k)
            if len(piece.cells) < cfg.min_cells:
                continue
            slices = segment.slice_region(piece, dirs[k], canvas, cfg.margin)
            peaks = segment.slice_peaks(slices, cfg)
            all_peaks.extend(peaks)
            for seg in segment.fit_segments(peaks, cfg.max_gap, cfg.max_residual, cfg.min_peaks):
                seg.en = _px_to_en(np.stack([seg.p0, seg.p1]), level, frame)
                ms, _ = frame.to_st(seg.en.mean(axis=0))
                seg.chunk_id = int(partition.chunk_of(ms))
                by_chunk.setdefault(seg.chunk_id, []).append(seg)
    return by_chunk, all_peaks


def extract_road_model(tiles, trajectory: BoundaryLine, model: classify.ForestModel, *,
                       surface: RoadSurface | None = None, corridor_half_width: float = 8.0,
                       chunk_length: float = 12.0, stride: int = 4,
                       seg_cfg: segment.SegmentConfig | None = None,
                       link_cfg: link.TightnessConfig | None = None,
                       linking: bool = True, map_version: int = 0, jobs: int = 1) -> ExtractionResult:
    """Classify patches, segment markings and link them into a lane model.

    ``tiles`` is a list of ``(quadkey, Raster)`` or a :class:`Canvas`. With
    ``linking`` False the gap-filling interpolation is skipped.
    """
    if isinstance(tiles, Canvas):
        canvas = tiles
    else:
        tiles = list(tiles)
        if not tiles:
            raise ValueError("no tiles")
        canvas = Canvas(tiles, tiles[0][1].georef[2])
    if surface is None:
        surface = corridor_surface(trajectory, corridor_half_width)
    partition = link.ChunkPartition(trajectory, chunk_length)
    pm = route_probability_map(canvas, surface, model, stride, jobs)
    by_chunk, peaks = segment_route(pm, canvas, partition, seg_cfg)
    link_cfg = link_cfg or link.TightnessConfig()
    groups = link.group_candidates(by_chunk, partition.frame, link_cfg)
    link.classify_groups(groups, partition.frame.length, link_cfg)
    if linking:
        link.interpolate_missing(groups, partition)
    out = link.to_road_model(groups, partition, map_version)
    log.info("extracted %d segments into %d groups", sum(map(len, by_chunk.values())), len(groups))
    return ExtractionResult(out, pm, by_chunk, groups, partition, peaks)


# -- training data -----------------------------------------------------------------


def training_patches(tiles: list[tuple[str, Raster]], markings: RoadModel, surface: RoadSurface,
                     size: int = 12, stride: int = 4):
    """Pixel patches and labels from every tile that the surface touches."""
    from .roadmodel import rasterize_model_masks
    from .tiles import to_grayscale

    P, Y = [], []
    for _, r in tiles:
        surf, mark = rasterize_model_masks(markings, surface, r)
        if not surf.any():
            continue
        p, _, _, lab = classify.patch_grid(to_grayscale(r).pixels, surf, size, stride, mark)
        P.append(p)
        Y.append(lab)
    if not P:
        return np.empty((0, size, size), np.uint8), np.empty(0, bool)
    return np.concatenate(P), np.concatenate(Y)


def train_from_tiles(tiles, markings: RoadModel, surface: RoadSurface, size: int = 12, stride: int = 4,
                     feature_kind: str = "pixel", cfg: classify.ForestConfig | None = None):
    """Balanced training set from labelled tiles and a forest fitted to it."""
    cfg = cfg or classify.ForestConfig()
    P, Y = training_patches(tiles, markings, surface, size, stride)
    if len(Y) == 0 or Y.all() or not Y.any():
        raise ValueError("training patches do not contain both classes")
    X = classify.features_batch(P, feature_kind)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    Xb, Yb = classify.balance(X, Y, cfg.neg_ratio, rng)
    m = classify.train_forest(Xb, Yb, cfg, feature_kind, size)
    m.meta.update({"n_samples": int(len(Yb)), "n_positive": int(Yb.sum()), "stride": stride})
    return m, Xb, Yb
