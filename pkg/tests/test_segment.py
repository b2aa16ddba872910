import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import OptimizeWarning, curve_fit

from helpers import blurred_line_slice
from lanemap import segment
from lanemap.classify import ProbabilityMap
from lanemap.segment import (
    PeakPoint,
    SegmentConfig,
    extract_regions,
    fit_segments,
    peak_pixel,
    slice_peaks,
    slice_region,
    subpixel_peak,
)
from lanemap.tiles import Raster


def pmap(values, stride=4):
    return ProbabilityMap(np.asarray(values, float), 0.0, 0.0, stride, 20, 12)


# -- regions -----------------------------------------------------------------------------


def test_empty_map():
    assert extract_regions(pmap(np.zeros((10, 10)))) == []


def test_two_blobs():
    v = np.zeros((12, 12))
    v[1:4, 1:4] = 0.9
    v[6:9, 6:9] = 0.7
    regs = extract_regions(pmap(v))
    assert len(regs) == 2
    assert all(np.all(r.values >= 0.5) for r in regs)


def test_diagonal_cells_connect_and_small_components_drop():
    v = np.zeros((8, 8))
    v[0, 0] = v[1, 1] = v[2, 2] = 0.9  # 8-connected diagonal of 3 cells
    v[6, 6] = v[6, 7] = 0.9  # only 2 cells
    regs = extract_regions(pmap(v))
    assert len(regs) == 1 and len(regs[0].cells) == 3


def test_threshold_domain():
    with pytest.raises(ValueError):
        extract_regions(pmap(np.zeros((3, 3))), threshold=1.0)


def test_region_centres_and_footprint():
    v = np.zeros((6, 6))
    v[2, 1:5] = 0.8
    pm = ProbabilityMap(v, 106.0, 206.0, 4, 20, 12)
    (r,) = extract_regions(pm)
    assert r.centers.tolist() == [[110.0, 214.0], [114.0, 214.0], [118.0, 214.0], [122.0, 214.0]]
    assert r.footprint == (108.0, 212.0, 124.0, 216.0)


def test_region_count_on_scene(short_scene, forest):
    from lanemap import pipeline
    from lanemap.tiles import Canvas

    from conftest import route_of

    traj = route_of(short_scene.truth)
    canvas = Canvas(short_scene.tiles, short_scene.spec.level)
    pm = pipeline.route_probability_map(canvas, pipeline.corridor_surface(traj, 8.0), forest)
    regions = extract_regions(pm)
    dashes = {ln.line_id for c in short_scene.painted.chunks for ln in c.boundaries if ln.kind == "dashed"}
    expected = 2 + len(dashes)  # two solid edges plus every dash
    assert abs(len(regions) - expected) <= max(2, 0.15 * expected)


# -- slicing -----------------------------------------------------------------------------


def test_vertical_region_slices_are_rows():
    img = np.random.default_rng(0).integers(0, 256, (64, 64)).astype(np.uint8)
    raster = Raster(img, None)
    centers = np.array([[30.0, y] for y in range(20, 44, 4)])
    r = segment.MarkingRegion(np.zeros((len(centers), 2), int), centers, np.ones(len(centers)), 4)
    slices = slice_region(r, (0.0, -1.0), raster, margin=2)  # trajectory up
    assert len(slices) == 24  # footprint spans y 18..42
    for sl in slices:
        pts = np.array([sl.point(i) for i in range(len(sl.values))])
        rows = np.unique(pts[:, 1])
        assert len(rows) == 1 and rows[0] % 1 == 0.5
        row = int(rows[0] - 0.5)
        cols = (pts[:, 0] - 0.5).astype(int)
        assert np.array_equal(sl.values, img[row, cols].astype(np.float32))
        assert pts[:, 0].max() - pts[:, 0].min() + 1 >= 4  # slice width >= region width


def test_diagonal_slice_count():
    img = np.zeros((200, 200), np.uint8)
    t = np.arange(0, 100, 2.0)
    centers = np.stack([50 + t / np.sqrt(2), 50 + t / np.sqrt(2)], axis=-1)
    r = segment.MarkingRegion(np.zeros((len(t), 2), int), centers, np.ones(len(t)), 4)
    slices = slice_region(r, np.array([1.0, 1.0]) / np.sqrt(2), Raster(img, None))
    length = np.hypot(*(centers[-1] - centers[0])) + 4  # region extent along the line
    assert abs(len(slices) - length) <= 1 + 1e-9


# -- peaks --------------------------------------------------------------------------------


def test_peak_pixel_examples():
    rows = [[90, 120, 151, 118, 95], [92, 130, 154, 125, 90], [91, 150, 140, 110, 93]]
    assert [r[peak_pixel(r)] for r in rows] == [151, 154, 150]
    assert peak_pixel([7, 7, 7]) == 0
    assert peak_pixel([1, 2, 3, 4]) == 3
    with pytest.raises(ValueError):
        peak_pixel([])


def test_subpixel_examples():
    assert subpixel_peak([100, 200, 100]) == (1.0, False)
    pos, flagged = subpixel_peak([90, 200, 110])
    assert not flagged and pos - 1 == pytest.approx(0.0719, abs=5e-5)


def gaussian_oracle(triple):
    """Fit a Gaussian through three samples numerically."""
    f = lambda x, a, mu, s: a * np.exp(-((x - mu) ** 2) / (2 * s * s))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OptimizeWarning)  # 3 points, 3 parameters: no covariance
        (a, mu, s), _ = curve_fit(f, np.array([-1.0, 0.0, 1.0]), np.asarray(triple, float), p0=[max(triple), 0.0, 1.0],
                                  maxfev=20000, xtol=1e-14, ftol=1e-14)
    return mu


@given(st.floats(0.05, 0.95), st.floats(-0.45, 0.45), st.floats(0.6, 3.0))
@settings(max_examples=50, deadline=None)
def test_subpixel_against_fit_oracle(_, mu, sigma):
    triple = 200 * np.exp(-((np.array([-1, 0, 1]) - mu) ** 2) / (2 * sigma**2))
    pos, flagged = subpixel_peak(triple)
    assert not flagged
    assert pos - 1 == pytest.approx(mu, abs=1e-9)
    assert pos - 1 == pytest.approx(gaussian_oracle(triple), abs=1e-3)


def test_subpixel_fallbacks():
    assert subpixel_peak([200, 100, 50]) == (0.0, True)  # edge maximum
    assert subpixel_peak([10, 20, 30, 40]) == (3.0, True)
    assert subpixel_peak([100, 100, 100]) == (0.0, True)  # flat, not concave


def test_zero_intensity_guard():
    pos, flagged = subpixel_peak([0, 50, 0])
    assert np.isfinite(pos) and pos == 1.0 and not flagged


@given(st.lists(st.floats(0, 255), min_size=3, max_size=30))
def test_correction_bounded(values):
    pos, _ = subpixel_peak(values)
    assert abs(pos - peak_pixel(values)) <= 0.5


def test_blurred_lines_improve_over_argmax():
    rng = np.random.default_rng(0)
    truth = 10 + rng.uniform(0, 1, 200)
    sub = np.array([subpixel_peak(blurred_line_slice(p))[0] for p in truth])
    pix = np.array([peak_pixel(blurred_line_slice(p)) for p in truth])
    assert np.mean(np.abs(sub - truth)) < np.mean(np.abs(pix - truth))
    assert np.all(np.abs(sub - pix) <= 0.5)


def test_slice_peaks_contrast_and_modes():
    flat = segment.IntensitySlice(0, 0.0, np.arange(10) + 0.5, np.full(10, 90.0) + np.arange(10) % 2,
                                  np.array([0.0, -1.0]), np.array([1.0, 0.0]))
    assert slice_peaks([flat]) == []
    v = np.full(30, 90.0)
    v[5:8] = [150, 220, 150]
    v[20:23] = [140, 200, 140]
    two = segment.IntensitySlice(3, 0.0, np.arange(30) + 0.5, v, np.array([0.0, -1.0]), np.array([1.0, 0.0]))
    peaks = slice_peaks([two])
    assert [round(p.position[0], 6) for p in peaks] == [6.5, 21.5]
    assert all(p.slice_index == 3 for p in peaks)
    v[20:23] = [100, 120, 100]  # weak second line is ignored
    assert len(slice_peaks([two])) == 1


# -- fitting ------------------------------------------------------------------------------


def peaks_from(xy, start=0):
    return [PeakPoint(np.array(p, float), 200.0, start + i) for i, p in enumerate(xy)]


def test_collinear_single_segment():
    xy = [(10 + 0.3 * i, 5 + i) for i in range(30)]
    (s,) = fit_segments(peaks_from(xy))
    assert s.rms_residual < 1e-9
    assert np.allclose(s.p0, xy[0]) and np.allclose(s.p1, xy[-1])


def test_gap_splits():
    xy = [(10.0, float(i)) for i in range(15)] + [(10.0, float(i)) for i in range(35, 50)]
    peaks = [PeakPoint(np.array(p), 200.0, int(p[1])) for p in xy]
    segs = fit_segments(peaks, max_gap=5)
    assert len(segs) == 2


def test_arc_stays_one_segment():
    radius, span = 500.0, 60.0
    y = np.arange(0, span + 1, 1.0)
    x = radius - np.sqrt(radius**2 - (y - span / 2) ** 2)
    segs = fit_segments(peaks_from(np.stack([x, y], -1)), max_residual=0.5)
    assert len(segs) == 1
    sagitta = span**2 / (8 * radius)
    # rms of a parabola about its best-fit chord is sagitta * sqrt(4/45)
    assert segs[0].rms_residual == pytest.approx(sagitta * np.sqrt(4 / 45), rel=0.05)
    assert segs[0].rms_residual < 0.5


def test_too_few_peaks_dropped():
    assert fit_segments(peaks_from([(0, 0), (0, 1)])) == []


def test_parallel_lines_in_one_region():
    left = [(10.0, float(i)) for i in range(20)]
    right = [(30.0, float(i)) for i in range(20)]
    peaks = []
    for i in range(20):
        peaks += [PeakPoint(np.array(left[i]), 200.0, i), PeakPoint(np.array(right[i]), 200.0, i)]
    segs = fit_segments(peaks)
    assert sorted(round(float(s.p0[0])) for s in segs) == [10, 30]


@given(st.lists(st.tuples(st.floats(-1, 1), st.integers(0, 1)), min_size=3, max_size=60), st.floats(0.2, 2.0))
@settings(max_examples=60, deadline=None)
def test_each_peak_used_at_most_once(noise, max_residual):
    peaks = [PeakPoint(np.array([20.0 * lane + dx, float(i)]), 200.0, i) for i, (dx, lane) in enumerate(noise)]
    segs = fit_segments(peaks, max_residual=max_residual)
    used = [id(p) for s in segs for p in s.peaks]
    assert len(used) == len(set(used))
    assert set(used) <= {id(p) for p in peaks}
    assert all(s.rms_residual >= 0 and s.length_px > 0 for s in segs)


def test_reversal_gives_same_line():
    rng = np.random.default_rng(2)
    xy = np.stack([5 + 0.2 * np.arange(25) + rng.normal(0, 0.1, 25), np.arange(25.0)], -1)
    (a,) = fit_segments(peaks_from(xy))
    (b,) = fit_segments(peaks_from(xy[::-1]))
    assert np.allclose(a.p0, b.p1, atol=1e-9) and np.allclose(a.p1, b.p0, atol=1e-9)
    assert a.rms_residual == pytest.approx(b.rms_residual)


def test_config_validation():
    with pytest.raises(ValueError):
        SegmentConfig(threshold=0)
    with pytest.raises(ValueError):
        SegmentConfig(max_gap=0)


def test_debug_outputs(tmp_path):
    segs = fit_segments(peaks_from([(1000.0 + i, 2000.0) for i in range(5)]))
    segment.write_peaks_csv(tmp_path / "p.csv", segs[0].peaks)
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "slice_index,x,y,intensity"
    segment.dump_segments_geojson(tmp_path / "s.geojson", segs, 20)
    gj = json.loads((tmp_path / "s.geojson").read_text())
    assert gj["features"][0]["geometry"]["type"] == "LineString"
