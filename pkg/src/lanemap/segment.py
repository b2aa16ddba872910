"""From a marking probability map to sub-pixel line segments.

High-probability cells form regions; each region is cut into 1-px slices
perpendicular to the trajectory, the brightest sample of every slice is
refined with a three-point Gaussian fit, and the resulting peaks are grouped
into straight segments by total least squares.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .classify import ProbabilityMap
from .tiles import Canvas, Raster, to_grayscale


@dataclass
class MarkingRegion:
    cells: np.ndarray  # (k, 2) integer (row, col) into the probability map
    centers: np.ndarray  # (k, 2) global pixel (x, y) of the cell centres
    values: np.ndarray
    stride: int

    @property
    def footprint(self) -> tuple[float, float, float, float]:
        h = self.stride / 2
        x, y = self.centers[:, 0], self.centers[:, 1]
        return float(x.min() - h), float(y.min() - h), float(x.max() + h), float(y.max() + h)

    def subset(self, keep) -> MarkingRegion:
        return MarkingRegion(self.cells[keep], self.centers[keep], self.values[keep], self.stride)


@dataclass
class PeakPoint:
    position: np.ndarray  # global pixel (x, y), real valued
    intensity: float
    slice_index: int
    flagged: bool = False


@dataclass
class IntensitySlice:
    index: int
    station: float  # along-trajectory pixel coordinate of the slice
    lateral: np.ndarray  # across-trajectory pixel coordinate of each sample
    values: np.ndarray
    direction: np.ndarray
    normal: np.ndarray

    def point(self, pos: float) -> np.ndarray:
        b = np.interp(pos, np.arange(len(self.lateral)), self.lateral)
        return self.station * self.direction + b * self.normal


@dataclass
class LineSegmentCandidate:
    p0: np.ndarray  # global pixel endpoints
    p1: np.ndarray
    peaks: list[PeakPoint] = field(default_factory=list)
    rms_residual: float = 0.0
    en: np.ndarray | None = None  # (2, 2) endpoints in route-plane metres, set downstream
    chunk_id: int | None = None
    synthetic: bool = False

    @property
    def length_px(self) -> float:
        return float(np.hypot(*(self.p1 - self.p0)))

    @property
    def length_m(self) -> float:
        return float(np.hypot(*(self.en[1] - self.en[0])))


@dataclass
class SegmentConfig:
    threshold: float = 0.5
    min_cells: int = 3
    max_gap: float = 5.0
    max_residual: float = 0.75
    min_peaks: int = 3
    margin: float = 2.0
    min_contrast: float = 20.0
    second_mode_ratio: float = 0.8

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("probability threshold must lie in (0, 1)")
        if self.max_gap <= 0 or self.max_residual <= 0:
            raise ValueError("max_gap and max_residual must be positive")


# -- regions ------------------------------------------------------------------

_EIGHT = np.ones((3, 3), dtype=bool)


def extract_regions(pm: ProbabilityMap, threshold: float = 0.5, min_cells: int = 3) -> list[MarkingRegion]:
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    labels, n = ndimage.label(pm.values >= threshold, structure=_EIGHT)
    if n == 0:
        return []
    rows, cols = np.nonzero(labels)
    lab = labels[rows, cols]
    order = np.argsort(lab, kind="stable")
    rows, cols, lab = rows[order], cols[order], lab[order]
    bounds = np.searchsorted(lab, np.arange(1, n + 2))
    out = []
    for k in range(n):
        a, b = bounds[k], bounds[k + 1]
        if b - a < min_cells:
            continue
        r, c = rows[a:b], cols[a:b]
        out.append(MarkingRegion(np.stack([r, c], axis=1), pm.centers(r, c), pm.values[r, c], pm.stride))
    return out


# -- slicing ----------------------------------------------------------------------


def _sample(image, xy: np.ndarray) -> np.ndarray:
    """Bilinear intensities at global pixel coordinates (pixel centres at +0.5)."""
    xy = np.asarray(xy, dtype=float)
    if isinstance(image, Canvas):
        x0 = int(math.floor(xy[..., 0].min())) - 1
        y0 = int(math.floor(xy[..., 1].min())) - 1
        x1 = int(math.ceil(xy[..., 0].max())) + 2
        y1 = int(math.ceil(xy[..., 1].max())) + 2
        img = image.window(x0, y0, x1 - x0, y1 - y0)
    else:
        img = to_grayscale(image).pixels.astype(np.float32)
        x0, y0 = image.origin_px if image.georef else (0, 0)
    coords = np.stack([xy[..., 1] - y0 - 0.5, xy[..., 0] - x0 - 0.5])
    return ndimage.map_coordinates(img, coords, order=1, mode="nearest")


def slice_region(r: MarkingRegion, trajectory_dir, image, margin: float = 2.0) -> list[IntensitySlice]:
    """Slices one pixel apart along ``trajectory_dir`` (global pixel axes, y down).

    Sample lattices sit on half-integers in both directions, so for
    axis-aligned trajectories every sample is a pixel centre and each slice is
    an image row or column.
    """
    d = np.asarray(trajectory_dir, dtype=float)
    d = d / np.hypot(*d)
    nrm = np.array([-d[1], d[0]])
    a = r.centers @ d
    b = r.centers @ nrm
    h = r.stride / 2
    stations = np.arange(math.floor(a.min() - h) + 0.5, a.max() + h, 1.0)
    slices = []
    points, spans = [], []
    for s in stations:
        near = np.abs(a - s) <= h + 0.5
        if not near.any():
            continue
        lo, hi = b[near].min() - h - margin, b[near].max() + h + margin
        lat = np.arange(math.floor(lo) + 0.5, hi + 1e-9, 1.0)
        if len(lat) < 3:
            continue
        spans.append((s, lat))
        points.append(s * d + lat[:, None] * nrm)
    if not points:
        return slices
    values = _sample(image, np.concatenate(points))
    k = 0
    for i, (s, lat) in enumerate(spans):
        slices.append(IntensitySlice(i, float(s), lat, values[k : k + len(lat)], d, nrm))
        k += len(lat)
    return slices


# -- peaks -------------------------------------------------------------------------


def peak_pixel(values) -> int:
    v = np.asarray(values)
    if v.size == 0:
        raise ValueError("empty slice")
    return int(np.argmax(v))


def subpixel_peak(values) -> tuple[float, bool]:
    """Peak position from a Gaussian through the maximum and its neighbours.

    Returns ``(position, flagged)``; flagged results fall back to the integer
    argmax (edge maximum or a log triple that is not concave).
    """
    v = np.asarray(values, dtype=float)
    i = peak_pixel(v)
    if i == 0 or i == len(v) - 1:
        return float(i), True
    lm, l0, lp = np.log(np.maximum(v[i - 1 : i + 2], 1.0))
    den = lm - 2.0 * l0 + lp
    if not den < 0:
        return float(i), True
    delta = 0.5 * (lm - lp) / den
    return float(i + min(0.5, max(-0.5, delta))), False


def _secondary_mode(v: np.ndarray, primary: int, base: float, ratio: float, min_sep: int = 3) -> int | None:
    interior = np.arange(1, len(v) - 1)
    is_max = (v[interior] >= v[interior - 1]) & (v[interior] > v[interior + 1])
    cand = interior[is_max & (np.abs(interior - primary) >= min_sep)]
    if not len(cand):
        return None
    j = int(cand[np.argmax(v[cand])])
    if v[j] - base < ratio * (v[primary] - base):
        return None
    # the two modes must be separated by a real dip
    lo, hi = sorted((j, primary))
    if v[lo : hi + 1].min() > base + 0.5 * (v[j] - base):
        return None
    return j


def slice_peaks(slices: list[IntensitySlice], cfg: SegmentConfig | None = None) -> list[PeakPoint]:
    cfg = cfg or SegmentConfig()
    peaks = []
    for sl in slices:
        v = sl.values
        base = float(np.median(v))
        i = peak_pixel(v)
        if v[i] - base < cfg.min_contrast:
            continue
        modes = [i]
        j = _secondary_mode(v, i, base, cfg.second_mode_ratio)
        if j is not None and v[j] - base >= cfg.min_contrast:
            modes.append(j)
        for m in sorted(modes):
            lo = max(0, m - 1)
            pos, flagged = subpixel_peak(v[lo : m + 2])
            pos += lo
            peaks.append(PeakPoint(sl.point(pos), float(v[m]), sl.index, flagged))
    return peaks


# -- fitting -------------------------------------------------------------------------


class _Run:
    """Incremental total-least-squares line through a run of peaks."""

    def __init__(self, p: PeakPoint):
        self.peaks = [p]
        self.s = np.zeros(5)  # sum x, y, xx, xy, yy
        self._add(p.position)

    def _add(self, q):
        x, y = q
        self.s += np.array([x, y, x * x, x * y, y * y])

    @staticmethod
    def _moments(s, n):
        c = s[:2] / n
        cxx = s[2] / n - c[0] ** 2
        cxy = s[3] / n - c[0] * c[1]
        cyy = s[4] / n - c[1] ** 2
        w, vecs = np.linalg.eigh(np.array([[cxx, cxy], [cxy, cyy]]))
        return c, vecs[:, 1], max(float(w[0]), 0.0)

    def trial_rms(self, p: PeakPoint) -> float:
        x, y = p.position
        s = self.s + np.array([x, y, x * x, x * y, y * y])
        return math.sqrt(self._moments(s, len(self.peaks) + 1)[2])

    def distance(self, p: PeakPoint) -> float:
        if len(self.peaks) < 2:
            return float(np.hypot(*(p.position - self.peaks[-1].position)))
        c, u, _ = self._moments(self.s, len(self.peaks))
        q = p.position - c
        return abs(float(u[0] * q[1] - u[1] * q[0]))

    def append(self, p: PeakPoint):
        self.peaks.append(p)
        self._add(p.position)

    def segment(self) -> LineSegmentCandidate:
        pts = np.array([p.position for p in self.peaks])
        c = pts.mean(axis=0)
        _, sv, vt = np.linalg.svd(pts - c, full_matrices=False)
        u = vt[0]
        t = (pts - c) @ u
        resid = (pts - c) @ np.array([-u[1], u[0]])
        rms = float(np.sqrt(np.mean(resid**2)))
        return LineSegmentCandidate(c + t[0] * u, c + t[-1] * u, list(self.peaks), rms)


def fit_segments(peaks: list[PeakPoint], max_gap: float = 5.0, max_residual: float = 0.75,
                 min_peaks: int = 3) -> list[LineSegmentCandidate]:
    """Greedy TLS runs over peaks ordered by slice.

    A peak extends the open run it lies closest to, provided it is within
    ``max_gap`` px of that run's last peak and the refit rms stays within
    ``max_residual``; otherwise that run closes and the peak starts a new one.
    Runs with fewer than ``min_peaks`` peaks are discarded.
    """
    open_runs: list[_Run] = []
    closed: list[_Run] = []
    for p in peaks:
        reachable = [r for r in open_runs if np.hypot(*(p.position - r.peaks[-1].position)) <= max_gap]
        # runs that can no longer be reached by later slices are finished
        for r in list(open_runs):
            if r not in reachable and p.slice_index - r.peaks[-1].slice_index > max_gap:
                open_runs.remove(r)
                closed.append(r)
        if reachable:
            best = min(reachable, key=lambda r: r.distance(p))
            if best.trial_rms(p) <= max_residual:
                best.append(p)
                continue
            open_runs.remove(best)
            closed.append(best)
        open_runs.append(_Run(p))
    closed.extend(open_runs)
    closed.sort(key=lambda r: (r.peaks[0].slice_index, r.peaks[0].position[0], r.peaks[0].position[1]))
    return [r.segment() for r in closed if len(r.peaks) >= min_peaks]


# -- debug output ------------------------------------------------------------------


def write_peaks_csv(path, peaks: list[PeakPoint]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["slice_index", "x", "y", "intensity"])
        for p in peaks:
            w.writerow([p.slice_index, f"{p.position[0]:.3f}", f"{p.position[1]:.3f}", f"{p.intensity:.2f}"])


def segments_geojson(segments: list[LineSegmentCandidate], level: int) -> dict:
    from . import geo

    feats = []
    for s in segments:
        xy = np.stack([s.p0, s.p1])
        lat, lon = geo.pixel_to_latlon_arr(xy[:, 0], xy[:, 1], level)
        feats.append({
            "type": "Feature",
            "properties": {"rms_residual": s.rms_residual, "peaks": len(s.peaks), "chunk": s.chunk_id},
            "geometry": {"type": "LineString", "coordinates": [[float(a), float(b)] for a, b in zip(lon, lat)]},
        })
    return {"type": "FeatureCollection", "features": feats}


def dump_segments_geojson(path, segments, level: int) -> None:
    with open(path, "w") as f:
        json.dump(segments_geojson(segments, level), f)
