"""Coordinate conversions between WGS84 geodetic, web-Mercator tile pixels,
ECEF and local North-East-Up frames.

Angles are degrees at the API boundary and radians internally. Pixel
coordinates are real-valued global pixel positions at a zoom level; the tile
index of a pixel is ``floor(pixel / 256)``.

Scalar helpers take and return the small dataclasses below. The ``*_arr``
variants work on numpy arrays and are what the raster pipeline uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# WGS84
EQUATORIAL_RADIUS = 6378137.0
FLATTENING = 1.0 / 298.257223563
ECC2 = FLATTENING * (2.0 - FLATTENING)
POLAR_RADIUS = EQUATORIAL_RADIUS * math.sqrt(1.0 - ECC2)

TILE_SIZE = 256
MIN_LEVEL, MAX_LEVEL = 1, 23
MAX_MERCATOR_LAT = 85.05112878


class GeoDomainError(ValueError):
    """Raised for coordinates outside the domain of a conversion."""


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float
    alt: float = 0.0

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise GeoDomainError(f"latitude {self.lat} out of range")
        if not -180.0 <= self.lon <= 180.0:
            raise GeoDomainError(f"longitude {self.lon} out of range")
        if not math.isfinite(self.alt):
            raise GeoDomainError("altitude must be finite")


@dataclass(frozen=True)
class TilePixel:
    level: int
    x: float
    y: float

    def __post_init__(self):
        _check_level(self.level)
        size = map_size(self.level)
        if not (0.0 <= self.x < size and 0.0 <= self.y < size):
            raise GeoDomainError(f"pixel ({self.x}, {self.y}) outside level-{self.level} map")

    @property
    def tile(self) -> tuple[int, int]:
        return int(self.x // TILE_SIZE), int(self.y // TILE_SIZE)


@dataclass(frozen=True)
class EcefPoint:
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass(frozen=True)
class NeuPoint:
    origin: GeoPoint
    n: float
    e: float
    u: float


def _check_level(level: int) -> None:
    if not (isinstance(level, (int, np.integer)) and MIN_LEVEL <= level <= MAX_LEVEL):
        raise GeoDomainError(f"level must be an integer in [{MIN_LEVEL}, {MAX_LEVEL}], got {level!r}")


def map_size(level: int) -> int:
    """Width and height of the whole world in pixels at ``level``."""
    return TILE_SIZE << level


# -- web Mercator -----------------------------------------------------------


def latlon_to_pixel_arr(lat, lon, level: int):
    """Vectorised forward projection; returns global pixel ``(x, y)`` arrays."""
    _check_level(level)
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if np.any(np.abs(lat) > MAX_MERCATOR_LAT):
        raise GeoDomainError("latitude beyond the web-Mercator limit")
    size = float(map_size(level))
    sin_lat = np.sin(np.radians(lat))
    x = (lon + 180.0) / 360.0 * size
    y = (0.5 - np.log((1.0 + sin_lat) / (1.0 - sin_lat)) / (4.0 * math.pi)) * size
    return x, y


def pixel_to_latlon_arr(x, y, level: int):
    """Vectorised inverse projection; returns ``(lat, lon)`` arrays in degrees."""
    _check_level(level)
    size = float(map_size(level))
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    lon = x / size * 360.0 - 180.0
    # Inverse of y = 1/2 - atanh(sin(lat)) / (2 pi).
    lat = np.degrees(np.arcsin(np.tanh(2.0 * math.pi * (0.5 - y / size))))
    return lat, lon


def latlon_to_pixel(p: GeoPoint, level: int) -> TilePixel:
    x, y = latlon_to_pixel_arr(p.lat, p.lon, level)
    return TilePixel(level, float(x), float(y))


def pixel_to_latlon(px: TilePixel) -> GeoPoint:
    lat, lon = pixel_to_latlon_arr(px.x, px.y, px.level)
    return GeoPoint(float(lat), float(lon))


def ground_resolution(lat: float, level: int) -> float:
    """Meters per pixel at latitude ``lat`` (degrees) on zoom ``level``."""
    _check_level(level)
    return math.cos(math.radians(lat)) * 2.0 * math.pi * EQUATORIAL_RADIUS / map_size(level)


# -- quadkeys ---------------------------------------------------------------


def tile_quadkey(tx: int, ty: int, level: int) -> str:
    _check_level(level)
    n = 1 << level
    if not (0 <= tx < n and 0 <= ty < n):
        raise GeoDomainError(f"tile ({tx}, {ty}) outside level {level}")
    digits = []
    for i in range(level, 0, -1):
        mask = 1 << (i - 1)
        digit = 0
        if tx & mask:
            digit += 1
        if ty & mask:
            digit += 2
        digits.append(str(digit))
    return "".join(digits)


def quadkey_to_tile(quadkey: str) -> tuple[int, int, int]:
    """Inverse of :func:`tile_quadkey`; returns ``(tx, ty, level)``."""
    level = len(quadkey)
    if not MIN_LEVEL <= level <= MAX_LEVEL:
        raise ValueError(f"malformed quadkey {quadkey!r}: bad length")
    tx = ty = 0
    for i, ch in enumerate(quadkey):
        if ch not in "0123":
            raise ValueError(f"malformed quadkey {quadkey!r}: bad digit {ch!r}")
        mask = 1 << (level - i - 1)
        d = int(ch)
        if d & 1:
            tx |= mask
        if d & 2:
            ty |= mask
    return tx, ty, level


# -- ECEF / NEU ---------------------------------------------------------------


def prime_vertical_radius(lat_rad):
    return EQUATORIAL_RADIUS / np.sqrt(1.0 - ECC2 * np.sin(lat_rad) ** 2)


def latlon_to_ecef_arr(lat, lon, alt=0.0) -> np.ndarray:
    """Geodetic degrees/meters to ECEF; returns an ``(..., 3)`` array."""
    phi = np.radians(np.asarray(lat, dtype=float))
    lam = np.radians(np.asarray(lon, dtype=float))
    h = np.asarray(alt, dtype=float)
    n = prime_vertical_radius(phi)
    x = (n + h) * np.cos(phi) * np.cos(lam)
    y = (n + h) * np.cos(phi) * np.sin(lam)
    z = (n * (1.0 - ECC2) + h) * np.sin(phi)
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def ecef_to_latlon_arr(xyz):
    """ECEF to geodetic ``(lat, lon, alt)`` by fixed-point iteration on latitude."""
    xyz = np.asarray(xyz, dtype=float)
    x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    p = np.hypot(x, y)
    lam = np.arctan2(y, x)
    phi = np.arctan2(z, p * (1.0 - ECC2))
    for _ in range(8):
        n = prime_vertical_radius(phi)
        h = p / np.cos(phi) - n
        phi = np.arctan2(z, p * (1.0 - ECC2 * n / (n + h)))
    n = prime_vertical_radius(phi)
    # Near the poles p/cos(phi) is ill-conditioned; use the z form there.
    cos_phi, sin_phi = np.cos(phi), np.sin(phi)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.where(
            np.abs(cos_phi) > 1e-6,
            p / cos_phi - n,
            np.abs(z) / np.abs(sin_phi) - n * (1.0 - ECC2),
        )
    return np.degrees(phi), np.degrees(lam), h


def latlon_to_ecef(p: GeoPoint) -> EcefPoint:
    x, y, z = latlon_to_ecef_arr(p.lat, p.lon, p.alt)
    return EcefPoint(float(x), float(y), float(z))


def ecef_to_latlon(p: EcefPoint) -> GeoPoint:
    lat, lon, alt = ecef_to_latlon_arr(p.as_array())
    return GeoPoint(float(lat), float(lon), float(alt))


def neu_rotation(origin: GeoPoint) -> np.ndarray:
    """Rows are the north, east and up unit vectors at ``origin`` in ECEF."""
    phi = math.radians(origin.lat)
    lam = math.radians(origin.lon)
    sp, cp = math.sin(phi), math.cos(phi)
    sl, cl = math.sin(lam), math.cos(lam)
    return np.array(
        [
            [-sp * cl, -sp * sl, cp],
            [-sl, cl, 0.0],
            [cp * cl, cp * sl, sp],
        ]
    )


def ecef_to_neu_arr(xyz, origin: GeoPoint) -> np.ndarray:
    """ECEF ``(..., 3)`` to local ``(..., 3)`` north/east/up around ``origin``."""
    o = latlon_to_ecef_arr(origin.lat, origin.lon, origin.alt)
    return (np.asarray(xyz, dtype=float) - o) @ neu_rotation(origin).T


def neu_to_ecef_arr(neu, origin: GeoPoint) -> np.ndarray:
    o = latlon_to_ecef_arr(origin.lat, origin.lon, origin.alt)
    return np.asarray(neu, dtype=float) @ neu_rotation(origin) + o


def ecef_to_neu(p: EcefPoint, origin: GeoPoint) -> NeuPoint:
    n, e, u = ecef_to_neu_arr(p.as_array(), origin)
    return NeuPoint(origin, float(n), float(e), float(u))


def neu_to_ecef(p: NeuPoint) -> EcefPoint:
    x, y, z = neu_to_ecef_arr([p.n, p.e, p.u], p.origin)
    return EcefPoint(float(x), float(y), float(z))


def latlon_to_en(lat, lon, origin: GeoPoint) -> np.ndarray:
    """Geodetic points to a planar ``(..., 2)`` east/north array around ``origin``.

    The up component is dropped; over the few kilometres a route spans the
    tangent plane drop is a few decimetres vertically and irrelevant
    horizontally.
    """
    neu = ecef_to_neu_arr(latlon_to_ecef_arr(lat, lon, 0.0), origin)
    return neu[..., [1, 0]]


def en_to_latlon(en, origin: GeoPoint):
    en = np.asarray(en, dtype=float)
    neu = np.stack([en[..., 1], en[..., 0], np.zeros(en.shape[:-1])], axis=-1)
    lat, lon, _ = ecef_to_latlon_arr(neu_to_ecef_arr(neu, origin))
    return lat, lon


# -- cross-system error functions ---------------------------------------------


def mercator_cartesian_error_dp(lat: float, dx: float, dy: float, level: int, lon: float = 0.0) -> float:
    """Distance between a pixel shift applied in Mercator space and the same
    shift applied metrically in the local tangent plane.

    Branch (a) shifts the projected pixel by ``(dx, dy)`` and back-projects
    to the ellipsoid; branch (b) moves ``dx`` pixels east and ``dy`` pixels
    south at the local ground resolution in the NEU plane. Both land in ECEF
    and the Euclidean distance between them is returned. Longitude does not
    influence the result and only picks where the evaluation happens.
    """
    return float(mercator_cartesian_error_dp_arr(lat, dx, dy, level, lon))


def mercator_cartesian_error_dp_arr(lat: float, dx, dy, level: int, lon: float = 0.0) -> np.ndarray:
    """:func:`mercator_cartesian_error_dp` over arrays of pixel shifts at one location."""
    dx, dy = np.broadcast_arrays(np.asarray(dx, dtype=float), np.asarray(dy, dtype=float))
    if np.any(np.abs(dx) > 2**16) or np.any(np.abs(dy) > 2**16):
        raise GeoDomainError("pixel shift too large")
    origin = GeoPoint(lat, lon, 0.0)
    x0, y0 = latlon_to_pixel_arr(lat, lon, level)
    lat1, lon1 = pixel_to_latlon_arr(x0 + dx, y0 + dy, level)
    merc = latlon_to_ecef_arr(lat1, lon1, 0.0)
    res = ground_resolution(lat, level)
    neu = np.stack([-dy * res, dx * res, np.zeros_like(dx)], axis=-1)
    cart = neu_to_ecef_arr(neu, origin)
    return np.linalg.norm(merc - cart, axis=-1)


def _tile_corner_ecef(tx: int, ty: int, level: int) -> np.ndarray:
    lat, lon = pixel_to_latlon_arr(tx * TILE_SIZE, ty * TILE_SIZE, level)
    return latlon_to_ecef_arr(lat, lon, 0.0)


def tile_span_error_de(tx: int, ty: int, level: int) -> float:
    """Absolute difference between the ECEF lengths of a tile's south and north edges."""
    _check_level(level)
    n = 1 << level
    if not (0 <= tx < n and 0 <= ty < n):
        raise GeoDomainError(f"tile ({tx}, {ty}) outside level {level}")
    south = np.linalg.norm(_tile_corner_ecef(tx + 1, ty + 1, level) - _tile_corner_ecef(tx, ty + 1, level))
    north = np.linalg.norm(_tile_corner_ecef(tx + 1, ty, level) - _tile_corner_ecef(tx, ty, level))
    return float(abs(south - north))
