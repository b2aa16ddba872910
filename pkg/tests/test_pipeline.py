import numpy as np

from lanemap import geo, pipeline
from lanemap.evaluate import evaluate
from lanemap.roadmodel import RouteFrame
from lanemap.tiles import Canvas

from conftest import route_of


def test_corridor_surface_offsets(short_scene):
    traj = route_of(short_scene.truth)
    surf = pipeline.corridor_surface(traj, 8.0)
    frame = RouteFrame(traj.latlon())
    for side, sign in ((surf.left_boundary, -1), (surf.right_boundary, 1)):
        _, t = frame.to_st(geo.latlon_to_en(side[:, 0], side[:, 1], frame.origin))
        np.testing.assert_allclose(t, sign * 8.0, atol=1e-3)


def test_polygon_mask_square():
    poly = np.array([[10.0, 10.0], [20.0, 10.0], [20.0, 20.0], [10.0, 20.0]])
    m = pipeline.polygon_mask(poly, 0, 0, 32, 32)
    assert m[15, 15] and not m[5, 5] and not m[25, 25]
    assert abs(int(m.sum()) - 100) <= 21  # outline pixels included


def test_probability_map_parallel_identical(short_scene, forest):
    canvas = Canvas(short_scene.tiles, 20)
    a = pipeline.route_probability_map(canvas, short_scene.surface, forest, 4, jobs=1)
    b = pipeline.route_probability_map(canvas, short_scene.surface, forest, 4, jobs=2)
    assert np.array_equal(a.values, b.values)
    assert (a.x0, a.y0) == (b.x0, b.y0)
    # grid aligned with the per-tile training grid
    assert a.x0 % 4 == (forest.patch_size // 2) % 4


def test_extraction_short_scene(short_scene, forest):
    res = pipeline.extract_road_model(short_scene.tiles, route_of(short_scene.truth), forest, map_version=0)
    assert len(res.model.chunks) == len(short_scene.truth.chunks)
    r = evaluate(short_scene.truth, res.model)
    assert r.frac_of_truth_matched > 0.8
    assert r.performance_geometry > 0.7


def test_training_patches_balanced(trained):
    _, _, Yb = trained
    n_pos = int(Yb.sum())
    assert 0 < n_pos and len(Yb) - n_pos <= 3 * n_pos
