import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lanemap import geo

mp.mp.dps = 40
A = mp.mpf(6378137)
F = 1 / mp.mpf("298.257223563")
E2 = F * (2 - F)


def mercator_oracle(lat, lon, level):
    size = mp.mpf(256) * 2**level
    s = mp.sin(mp.radians(mp.mpf(lat)))
    x = (mp.mpf(lon) + 180) / 360 * size
    y = (mp.mpf("0.5") - mp.log((1 + s) / (1 - s)) / (4 * mp.pi)) * size
    return x, y


def ecef_oracle(lat, lon, h=0):
    phi, lam = mp.radians(mp.mpf(lat)), mp.radians(mp.mpf(lon))
    n = A / mp.sqrt(1 - E2 * mp.sin(phi) ** 2)
    return ((n + h) * mp.cos(phi) * mp.cos(lam), (n + h) * mp.cos(phi) * mp.sin(lam), (n * (1 - E2) + h) * mp.sin(phi))


# -- Mercator ------------------------------------------------------------------------


def test_projection_centre_level1():
    px = geo.latlon_to_pixel(geo.GeoPoint(0, 0), 1)
    assert (px.x, px.y) == (256.0, 256.0)


def test_west_edge_level3():
    x, y = geo.latlon_to_pixel_arr(0.0, -180.0, 3)
    assert float(x) == 0.0 and float(y) == 1024.0


def test_munich_example_against_high_precision_oracle():
    px = geo.latlon_to_pixel(geo.GeoPoint(48.2203, 11.5126), 20)
    ox, oy = mercator_oracle(48.2203, 11.5126, 20)
    assert px.x == pytest.approx(float(ox), abs=1e-6)
    assert px.y == pytest.approx(float(oy), abs=1e-6)
    assert px.x == pytest.approx(1.42802e8, rel=1e-5)
    # The commonly quoted 9.3077e7 is off by ~1.1e4 px; the formula gives 9.3066e7.
    assert px.y == pytest.approx(9.3066e7, rel=1e-5)


def test_inverse_examples():
    p = geo.pixel_to_latlon(geo.TilePixel(1, 256, 256))
    assert p.lat == pytest.approx(0, abs=1e-12) and p.lon == pytest.approx(0, abs=1e-12)
    x, y = geo.latlon_to_pixel_arr(48.2203, 11.5126, 20)
    lat, lon = geo.pixel_to_latlon_arr(x, y, 20)
    assert float(lat) == pytest.approx(48.2203, abs=1e-9) and float(lon) == pytest.approx(11.5126, abs=1e-9)


def test_beyond_mercator_limit_rejected():
    with pytest.raises(geo.GeoDomainError):
        geo.latlon_to_pixel(geo.GeoPoint(86.0, 0.0), 10)
    with pytest.raises(geo.GeoDomainError):
        geo.GeoPoint(91.0, 0.0)


def test_round_trip_1000_points_level20(rng):
    lat = rng.uniform(-85, 85, 1000)
    lon = rng.uniform(-180, 180, 1000)
    x, y = geo.latlon_to_pixel_arr(lat, lon, 20)
    lat2, lon2 = geo.pixel_to_latlon_arr(x, y, 20)
    assert np.max(np.abs(lat2 - lat)) < 1e-9
    assert np.max(np.abs(lon2 - lon)) < 1e-9


@given(st.floats(-85, 85), st.floats(-179.9, 179.9), st.floats(0.0, 1.0), st.integers(1, 23))
def test_projection_monotone(lat, lon, step, level):
    x0, y0 = geo.latlon_to_pixel_arr(lat, lon, level)
    x1, _ = geo.latlon_to_pixel_arr(lat, min(lon + step + 1e-3, 180.0), level)
    _, y1 = geo.latlon_to_pixel_arr(max(lat - step - 1e-3, -85.0), lon, level) if lat > -85 else (0, y0 + 1)
    assert x1 > x0
    assert y1 > y0


# -- ground resolution ------------------------------------------------------------------


def test_ground_resolution_values():
    assert geo.ground_resolution(0, 20) == pytest.approx(40075016.6856 / 2**28, rel=1e-9)
    assert geo.ground_resolution(0, 20) == pytest.approx(0.14930, abs=1e-5)
    assert geo.ground_resolution(60, 20) == pytest.approx(0.07465, abs=1e-5)
    assert geo.ground_resolution(0, 19) == 2 * geo.ground_resolution(0, 20)


# -- quadkeys ---------------------------------------------------------------------------


def interleave(tx, ty, level):
    return "".join(str(((tx >> i) & 1) + 2 * ((ty >> i) & 1)) for i in range(level - 1, -1, -1))


def test_quadkey_examples():
    assert geo.tile_quadkey(0, 0, 1) == "0"
    assert geo.tile_quadkey(3, 5, 3) == "213"
    assert geo.quadkey_to_tile("213") == (3, 5, 3)


@given(st.integers(1, 23).flatmap(lambda l: st.tuples(st.just(l), st.integers(0, 2**l - 1), st.integers(0, 2**l - 1))))
def test_quadkey_bijective_and_matches_interleave(t):
    level, tx, ty = t
    qk = geo.tile_quadkey(tx, ty, level)
    assert qk == interleave(tx, ty, level)
    assert geo.quadkey_to_tile(qk) == (tx, ty, level)


@pytest.mark.parametrize("bad", ["", "0124", "a", "0" * 24])
def test_malformed_quadkey(bad):
    with pytest.raises(ValueError):
        geo.quadkey_to_tile(bad)


# -- ECEF and NEU -------------------------------------------------------------------------


def test_ecef_examples():
    e = geo.latlon_to_ecef(geo.GeoPoint(0, 0, 0))
    assert (e.x, e.y, e.z) == pytest.approx((6378137.0, 0.0, 0.0), abs=1e-9)
    pole = geo.latlon_to_ecef(geo.GeoPoint(90, 0, 0))
    assert pole.x == pytest.approx(0, abs=1e-6) and pole.z == pytest.approx(6356752.314245, abs=1e-5)
    m = geo.latlon_to_ecef(geo.GeoPoint(48.2203, 11.5126, 0))
    ox = ecef_oracle(48.2203, 11.5126)
    assert m.as_array() == pytest.approx([float(v) for v in ox], abs=1e-6)
    assert 6.36e6 < np.linalg.norm(m.as_array()) < 6.37e6


@given(st.floats(-89.9, 89.9), st.floats(-180, 180), st.floats(-500, 9000))
@settings(max_examples=200)
def test_ecef_round_trip(lat, lon, alt):
    p = geo.ecef_to_latlon(geo.latlon_to_ecef(geo.GeoPoint(lat, lon, alt)))
    assert p.lat == pytest.approx(lat, abs=1e-9)
    assert p.alt == pytest.approx(alt, abs=1e-4)
    if abs(lat) < 89.9:
        assert math.cos(math.radians(p.lon - lon)) == pytest.approx(1.0, abs=1e-12)


def test_neu_origin_and_north_offset():
    o = geo.GeoPoint(48.2203, 11.5126)
    n0 = geo.ecef_to_neu(geo.latlon_to_ecef(o), o)
    assert (n0.n, n0.e, n0.u) == pytest.approx((0, 0, 0), abs=1e-6)
    # 100 m north along the meridian using the meridional radius of curvature
    s2 = math.sin(math.radians(o.lat)) ** 2
    m = geo.EQUATORIAL_RADIUS * (1 - geo.ECC2) / (1 - geo.ECC2 * s2) ** 1.5
    north = geo.GeoPoint(o.lat + math.degrees(100.0 / m), o.lon)
    p = geo.ecef_to_neu(geo.latlon_to_ecef(north), o)
    assert p.n == pytest.approx(100.0, abs=0.01)
    assert abs(p.e) < 0.01 and abs(p.u) < 0.01


def test_neu_round_trip_1000(rng):
    o = geo.GeoPoint(-33.9, 151.2, 40.0)
    neu = rng.uniform(-5000, 5000, (1000, 3))
    back = geo.ecef_to_neu_arr(geo.neu_to_ecef_arr(neu, o), o)
    assert np.max(np.abs(back - neu)) < 1e-6


# -- cross-system error --------------------------------------------------------------------


def dp_oracle(lat, dx, dy, level):
    """Both branches evaluated in 40-digit arithmetic."""
    size = mp.mpf(256) * 2**level
    x0, y0 = mercator_oracle(lat, 0, level)
    lon1 = (x0 + dx) / size * 360 - 180
    lat1 = mp.degrees(mp.asin(mp.tanh(2 * mp.pi * (mp.mpf("0.5") - (y0 + dy) / size))))
    a = ecef_oracle(lat1, lon1)
    phi = mp.radians(mp.mpf(lat))
    res = mp.cos(phi) * 2 * mp.pi * A / size
    n, e = -dy * res, dx * res
    o = ecef_oracle(lat, 0)
    # NEU basis vectors at (lat, 0)
    north = (-mp.sin(phi), 0, mp.cos(phi))
    east = (0, 1, 0)
    b = [o[i] + n * north[i] + e * east[i] for i in range(3)]
    return float(mp.sqrt(sum((a[i] - b[i]) ** 2 for i in range(3))))


@pytest.mark.parametrize("lat,dx,dy", [(48.22, 128, 0), (0.0, 256, 0), (70.0, -200, 0), (-45.0, 100, 50)])
def test_dp_matches_oracle(lat, dx, dy):
    assert geo.mercator_cartesian_error_dp(lat, dx, dy, 20) == pytest.approx(dp_oracle(lat, dx, dy, 20), abs=1e-6)


def test_dp_zero_shift_and_monotone():
    for lat in (-60.0, 0.0, 48.22):
        assert geo.mercator_cartesian_error_dp(lat, 0, 0, 20) == pytest.approx(0.0, abs=1e-6)
    vals = geo.mercator_cartesian_error_dp_arr(48.22, np.arange(16, 257, 16.0), 0.0, 20)
    assert vals[7] > 0
    assert np.all(np.diff(vals) > 0)


def test_dp_below_five_cm_worldwide():
    dx = np.arange(-256, 257, 8.0)
    worst = max(float(geo.mercator_cartesian_error_dp_arr(float(lat), dx, 0.0, 20).max()) for lat in range(-85, 86))
    assert worst < 0.05


def test_de_symmetry_and_monotonicity():
    level = 20
    n = 1 << level
    # tiles straddling the equator are symmetric
    assert geo.tile_span_error_de(0, n // 2, level) < 1e-3
    assert geo.tile_span_error_de(0, n // 2 - 1, level) < 1e-3
    # The absolute edge-length difference scales like sin(lat) cos(lat)^2, so it
    # rises up to atan(1/sqrt(2)) ~ 35.3 deg and falls beyond; relative to the
    # edge length it rises all the way to the pole.
    lats = [1.0, 5.0, 10.0, 20.0, 30.0, 35.0, 45.0, 60.0, 75.0, 84.0]
    de, rel = [], []
    for lat in lats:
        tx, ty = geo.latlon_to_pixel(geo.GeoPoint(lat, 0.0), level).tile
        de.append(geo.tile_span_error_de(tx, ty, level))
        north = np.linalg.norm(geo._tile_corner_ecef(tx + 1, ty, level) - geo._tile_corner_ecef(tx, ty, level))
        rel.append(de[-1] / north)
    assert all(b > a for a, b in zip(de[:6], de[1:6]))
    assert all(b < a for a, b in zip(de[6:], de[7:]))
    assert all(b > a for a, b in zip(rel, rel[1:]))
    for lat in lats:
        tx, ty = geo.latlon_to_pixel(geo.GeoPoint(-lat, 0.0), level).tile
        assert geo.tile_span_error_de(tx, ty, level) == pytest.approx(de[lats.index(lat)], rel=0.05)
    for level in (17, 18, 19, 20):
        a = geo.latlon_to_pixel(geo.GeoPoint(48.22, 11.5), level).tile
        b = geo.latlon_to_pixel(geo.GeoPoint(48.22, 11.5), level + 1).tile
        assert geo.tile_span_error_de(*b, level + 1) < geo.tile_span_error_de(*a, level)
