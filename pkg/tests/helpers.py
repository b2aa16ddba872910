"""Shared builders for tests."""

import uuid

import numpy as np

from lanemap import geo
from lanemap.roadmodel import BoundaryLine, Chunk

ORIGIN = geo.GeoPoint(48.2203, 11.5126)


def uid(rng) -> str:
    return str(uuid.UUID(int=int(rng.integers(0, 2**63)) << 64 | int(rng.integers(0, 2**63))))


def en_line(en, origin=ORIGIN):
    lat, lon = geo.en_to_latlon(np.asarray(en, dtype=float), origin)
    return np.stack([lat, lon], axis=-1)


def straight_line(kind, length, offset=0.0, heading_deg=0.0, step=1.0, start=0.0, line_id=None, rng=None):
    """Line parallel to a trajectory leaving ``ORIGIN`` at ``heading_deg`` (clockwise from north)."""
    h = np.radians(heading_deg)
    d = np.array([np.sin(h), np.cos(h)])
    right = np.array([d[1], -d[0]])
    s = np.append(np.arange(start, length, step), length)
    en = s[:, None] * d + offset * right
    rng = rng or np.random.default_rng(0)
    return BoundaryLine.from_array(line_id or uid(rng), kind, en_line(en))


def random_chunk(rng, cid=None) -> Chunk:
    lines = []
    base = np.array([rng.uniform(-80, 80), rng.uniform(-179, 179)])
    kinds = ["trajectory"] + list(rng.choice(["solid", "dashed"], size=int(rng.integers(0, 6))))
    for kind in kinds:
        n = int(rng.integers(2, 8))
        pts = base + np.cumsum(rng.uniform(1e-6, 1e-4, (n, 2)), axis=0) * rng.choice([-1, 1], 2)
        lines.append(BoundaryLine.from_array(uid(rng), str(kind), pts))
    return Chunk(int(rng.integers(0, 10**6)) if cid is None else cid, int(rng.integers(0, 1000)), tuple(lines))


def blurred_line_slice(position: float, n: int = 21, sigma: float = 1.0, base: float = 90.0, amplitude: float = 130.0):
    """Pixel-integrated Gaussian line profile; ``position`` in pixel-index units (pixel i centred at i)."""
    from scipy.stats import norm

    edges = np.arange(n + 1) - 0.5
    mass = np.diff(norm.cdf(edges, loc=position, scale=sigma))
    return base + amplitude * mass / norm.pdf(0, scale=sigma)
