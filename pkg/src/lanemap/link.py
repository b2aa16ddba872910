"""Linking per-chunk segment candidates into a labelled lane model.

Segments are grouped by lateral offset from the trajectory while sweeping the
chunks in route order. A group's function follows from how much of the road
it covers: long groups are solid road edges, sparse ones dashed lane
dividers, and tiny ones noise. Chunks a group skips are filled by
interpolation before the model is written out.
"""

from __future__ import annotations

import math
import uuid
from dataclasses import dataclass, field

import numpy as np

from .roadmodel import BoundaryLine, Chunk, RoadModel, RouteFrame, chunk_count, chunk_road
from .segment import LineSegmentCandidate

FUNCTIONS = ("solid", "dashed", "ignored", "unknown")
_GROUP_NAMESPACE = uuid.UUID("6f1c2a8e-3b0d-5c47-9e21-7a4d8b6c0f13")

@dataclass
class TightnessConfig:
    distance_threshold: float = 1.0
    search_range: int = 3
    dashed_ratio_max: float = 0.40
    solid_ratio_min: float = 0.80
    noise_ratio_min: float = 0.10
    expected_lane_count: int | None = None
    lane_width: float = 3.5

    def __post_init__(self):
        if not 0 < self.noise_ratio_min <= self.dashed_ratio_max < self.solid_ratio_min <= 1:
            raise ValueError("ratios must satisfy 0 < noise <= dashed < solid <= 1")
        if self.distance_threshold <= 0 or self.search_range < 1:
            raise ValueError("distance_threshold and search_range must be positive")

@dataclass
class LineGroup:
    group_id: int
    members: dict[int, list[LineSegmentCandidate]] = field(default_factory=dict)
    mean_offset: float = 0.0
    function: str = "unknown"
    ratio: float = 0.0
    count: int = 0

    @property
    def chunk_ids(self) -> list[int]:
        return sorted(self.members)

    def add(self, chunk_id: int, seg: LineSegmentCandidate, offset: float) -> None:
        self.members.setdefault(chunk_id, []).append(seg)
        self.count += 1
        self.mean_offset += (offset - self.mean_offset) / self.count

    def detected_length(self) -> float:
        return sum(s.length_m for segs in self.members.values() for s in segs if not s.synthetic)

@dataclass
class ChunkPartition:
    """Equal-length arc-length chunks of a trajectory."""

    trajectory: BoundaryLine
    chunk_length: float = 12.0
    frame: RouteFrame = None

    def __post_init__(self):
        if self.frame is None:
            self.frame = RouteFrame(self.trajectory.latlon())
        self._pieces = None

    def trajectory_piece(self, k: int) -> BoundaryLine:
        if self._pieces is None:
            self._pieces = chunk_road([], self.trajectory, self.chunk_length).chunks
        return self._pieces[k].trajectory

    @property
    def n_chunks(self) -> int:
        return chunk_count(self.frame.length, self.chunk_length)

    def bounds(self, k: int) -> tuple[float, float]:
        return k * self.chunk_length, min((k + 1) * self.chunk_length, self.frame.length)

    def chunk_of(self, s) -> np.ndarray:
        return np.clip(np.floor(np.asarray(s) / self.chunk_length), 0, self.n_chunks - 1).astype(int)

# -- geometry --------------------------------------------------------------------

def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    dd = float(d @ d)
    u = np.zeros(len(p)) if dd == 0 else np.clip((p - a) @ d / dd, 0.0, 1.0)
    foot = a + u[:, None] * d
    return np.hypot(*(p - foot).T)

def relative_distance(a: LineSegmentCandidate, b: LineSegmentCandidate, n_points: int = 9) -> float:
    """Mean point-to-segment distance over evenly spaced points, averaged both ways.

    Points sit at the centres of ``n_points`` equal pieces of each segment
    (midpoint rule), which tracks the continuous average far better than
    including both endpoints when the segments cross.
    """
    f = ((np.arange(n_points) + 0.5) / n_points)[:, None]
    pa = a.en[0] + f * (a.en[1] - a.en[0])
    pb = b.en[0] + f * (b.en[1] - b.en[0])
    ab = _point_segment_distance(pa, b.en[0], b.en[1]).mean()
    ba = _point_segment_distance(pb, a.en[0], a.en[1]).mean()
    return float(0.5 * (ab + ba))

def signed_offset(seg: LineSegmentCandidate, frame: RouteFrame) -> float:
    """Offset of the segment midpoint from the trajectory, negative on the left."""
    _, t = frame.to_st(seg.en.mean(axis=0))
    return float(t)

# -- grouping ----------------------------------------------------------------------

def group_candidates(segments: dict[int, list[LineSegmentCandidate]], frame: RouteFrame,
                     cfg: TightnessConfig | None = None) -> list[LineGroup]:
    """Sweep chunks in id order, each chunk's segments by offset.

    A segment joins the group with the nearest running mean offset if that is
    within the distance threshold and the group was seen within the search
    range; otherwise it starts a new group.
    """
    cfg = cfg or TightnessConfig()
    groups: list[LineGroup] = []
    last_seen: dict[int, int] = {}
    for cid in sorted(segments):
        items = sorted(((signed_offset(s, frame), i, s) for i, s in enumerate(segments[cid])), key=lambda x: (x[0], x[1]))
        for off, _, seg in items:
            best, best_d = None, None
            for g in groups:
                if cid - last_seen[g.group_id] > cfg.search_range:
                    continue
                dist = abs(g.mean_offset - off)
                if dist <= cfg.distance_threshold and (best is None or dist < best_d):
                    best, best_d = g, dist
            if best is None:
                best = LineGroup(len(groups))
                groups.append(best)
            best.add(cid, seg, off)
            last_seen[best.group_id] = cid
    return groups

def _lattice_distance(offset: float, n_lanes: int, lane_width: float) -> float:
    lattice = (np.arange(n_lanes + 1) - n_lanes / 2) * lane_width
    return float(np.min(np.abs(lattice - offset)))

def classify_groups(groups: list[LineGroup], road_length: float, cfg: TightnessConfig | None = None) -> list[LineGroup]:
    """Label groups by detected-length ratio and keep one solid edge per side.

    The solid kept on each side is the one nearest the trajectory; other
    solids, and anything lying beyond a kept solid, are ignored.
    """
    cfg = cfg or TightnessConfig()
    if road_length <= 0:
        raise ValueError("road_length must be positive")
    for g in groups:
        g.ratio = g.detected_length() / road_length
        if g.ratio >= cfg.solid_ratio_min:
            g.function = "solid"
        elif g.ratio < cfg.noise_ratio_min:
            g.function = "ignored"
        else:
            g.function = "dashed"

    if cfg.expected_lane_count:
        live = [g for g in groups if g.function != "ignored"]
        live.sort(key=lambda g: (_lattice_distance(g.mean_offset, cfg.expected_lane_count, cfg.lane_width), -g.ratio))
        for g in live[cfg.expected_lane_count + 1 :]:
            g.function = "ignored"

    solids = [g for g in groups if g.function == "solid"]
    left = [g for g in solids if g.mean_offset < 0]
    right = [g for g in solids if g.mean_offset >= 0]
    keep_left = max(left, key=lambda g: g.mean_offset) if left else None
    keep_right = min(right, key=lambda g: g.mean_offset) if right else None
    lo = keep_left.mean_offset if keep_left else -math.inf
    hi = keep_right.mean_offset if keep_right else math.inf
    for g in groups:
        if g.function == "ignored" or g is keep_left or g is keep_right:
            continue
        if g.function == "solid" or not lo < g.mean_offset < hi:
            g.function = "ignored"
    return groups

def _member_offsets(g: LineGroup, frame: RouteFrame) -> dict[int, float]:
    return {cid: float(np.mean([signed_offset(s, frame) for s in segs])) for cid, segs in g.members.items()}

def interpolate_missing(groups: list[LineGroup], partition: ChunkPartition) -> list[LineGroup]:
    """Fill chunks a group skips with a flagged synthetic segment spanning the chunk."""
    frame = partition.frame
    for g in groups:
        if g.function == "ignored" or not g.members:
            continue
        offsets = _member_offsets(g, frame)
        known = np.array(sorted(offsets))
        vals = np.array([offsets[c] for c in known])
        for cid in range(int(known[0]) + 1, int(known[-1])):
            if cid in g.members:
                continue
            off = float(np.interp(cid, known, vals))
            s0, s1 = partition.bounds(cid)
            en = frame.from_st(np.array([s0, s1]), np.array([off, off]))
            seg = LineSegmentCandidate(np.zeros(2), np.zeros(2), [], 0.0, en, cid, True)
            g.members[cid] = [seg]
    return groups

def _group_line_id(trajectory: BoundaryLine, gid: int) -> str:
    return str(uuid.uuid5(_GROUP_NAMESPACE, f"{trajectory.line_id}:{gid}"))

def _profile(g: LineGroup, frame: RouteFrame) -> tuple[np.ndarray, np.ndarray]:
    """Offset as a function of station, from every member endpoint."""
    pts = np.concatenate([s.en for segs in g.members.values() for s in segs])
    s, t = frame.to_st(pts)
    order = np.argsort(s, kind="stable")
    return s[order], t[order]

def to_road_model(groups: list[LineGroup], partition: ChunkPartition, map_version: int = 0,
                  sample_spacing: float = 2.0) -> RoadModel:
    """One boundary line per labelled group per chunk it has members in.

    Each line spans its whole chunk and follows the group's offset profile,
    held constant beyond the outermost member points.
    """
    frame = partition.frame
    live = sorted((g for g in groups if g.function in ("solid", "dashed") and g.members), key=lambda g: g.mean_offset)
    profiles = {g.group_id: _profile(g, frame) for g in live}
    traj = partition.trajectory
    chunks = []
    for k in range(partition.n_chunks):
        s0, s1 = partition.bounds(k)
        n = max(2, math.ceil((s1 - s0) / sample_spacing) + 1)
        stations = np.linspace(s0, s1, n)
        lines = [partition.trajectory_piece(k)]
        for g in live:
            if k not in g.members:
                continue
            ps, pt = profiles[g.group_id]
            t = np.interp(stations, ps, pt)
            ll = frame.st_to_latlon(stations, t)
            lines.append(BoundaryLine(_group_line_id(traj, g.group_id), g.function, tuple(map(tuple, ll))))
        chunks.append(Chunk(k, map_version, tuple(lines)))
    return RoadModel(tuple(chunks), partition.chunk_length)

def groups_geojson(groups: list[LineGroup], frame: RouteFrame) -> dict:
    colors = {"solid": "#00a000", "dashed": "#80e080", "ignored": "#808080", "unknown": "#000000"}
    feats = []
    for g in groups:
        for cid, segs in sorted(g.members.items()):
            for s in segs:
                ll = frame.to_latlon(s.en)
                feats.append({
                    "type": "Feature",
                    "properties": {"group": g.group_id, "function": g.function, "chunk": cid,
                                   "synthetic": s.synthetic, "stroke": colors[g.function]},
                    "geometry": {"type": "LineString", "coordinates": [[float(b), float(a)] for a, b in ll]},
                })
    return {"type": "FeatureCollection", "features": feats}
