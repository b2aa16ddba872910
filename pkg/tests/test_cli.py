import csv
import json
import shutil

import numpy as np
import pytest
from PIL import Image

from lanemap import geo
from lanemap.cli import main
from lanemap.evaluate import evaluate
from lanemap.roadmodel import RoadModel

SPEC = """[scene]
length = 60.0
lane_count = 2
seed = 21
heading = 40.0
map_version = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "scene.ini").write_text(SPEC)
    assert main(["synth", str(root / "scene.ini"), str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data"), "--model-out", str(root / "model.json"),
                 "--trees", "15", "--cv-folds", "3"]) == 0
    return root


@pytest.fixture(scope="module")
def extracted(workspace):
    out = workspace / "pred"
    assert main(["extract", "--model", str(workspace / "model.json"), "--route", str(workspace / "data" / "route.geojson"),
                 "--tiles", str(workspace / "data" / "tiles"), "--map-version", "2", "--out", str(out)]) == 0
    return out


def test_synth_outputs(workspace):
    data = workspace / "data"
    for name in ("tiles", "truth", "surface.json", "route.geojson", "scene.ini"):
        assert (data / name).exists()
    assert list((data / "tiles" / "2").glob("*.png"))


def test_synth_rerun_identical(workspace, tmp_path):
    assert main(["synth", str(workspace / "scene.ini"), str(tmp_path / "again")]) == 0
    for f in sorted((workspace / "data").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "again" / f.relative_to(workspace / "data")).read_bytes()


def test_synth_invalid_spec(tmp_path):
    (tmp_path / "bad.ini").write_text("[scene]\nlane_count = 0\n")
    assert main(["synth", str(tmp_path / "bad.ini"), str(tmp_path / "out")]) == 2
    assert main(["synth", str(tmp_path / "missing.ini"), str(tmp_path / "out")]) == 2


def test_synth_with_occlusion(workspace, tmp_path):
    assert main(["synth", str(workspace / "scene.ini"), str(tmp_path / "occ"), "--occlusion", "0.3"]) == 0
    a = sorted((workspace / "data" / "tiles").rglob("*.png"))
    b = sorted((tmp_path / "occ" / "tiles").rglob("*.png"))
    assert any(x.read_bytes() != y.read_bytes() for x, y in zip(a, b))


def test_train_prints_cv(workspace, capsys, tmp_path):
    assert main(["train", "--data", str(workspace / "data"), "--model-out", str(tmp_path / "m.json"),
                 "--trees", "5", "--cv-folds", "3", "--patch-size", "16"]) == 0
    out = capsys.readouterr().out
    assert "3-fold CV precision" in out and "recall" in out
    assert json.loads((tmp_path / "m.json").read_text())["patch_size"] == 16


def test_train_deterministic(workspace, tmp_path):
    args = ["--data", str(workspace / "data"), "--trees", "5", "--cv-folds", "0"]
    assert main(["train", *args, "--model-out", str(tmp_path / "a.json")]) == 0
    assert main(["train", *args, "--model-out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_train_missing_truth(workspace, tmp_path):
    shutil.copytree(workspace / "data" / "tiles", tmp_path / "d" / "tiles")
    (tmp_path / "d" / "surface.json").write_text((workspace / "data" / "surface.json").read_text())
    assert main(["train", "--data", str(tmp_path / "d"), "--model-out", str(tmp_path / "m.json")]) == 2


def test_train_single_class(workspace, tmp_path):
    d = tmp_path / "d"
    shutil.copytree(workspace / "data", d)
    # a surface far from the road holds no markings
    far = {"left_boundary": [[0.0, 0.0], [0.00001, 0.0]], "right_boundary": [[0.0, 0.00001], [0.00001, 0.00001]]}
    (d / "surface.json").write_text(json.dumps(far))
    assert main(["train", "--data", str(d), "--model-out", str(tmp_path / "m.json"), "--cv-folds", "0"]) == 3


def test_extract_output(workspace, extracted):
    truth = RoadModel.load(workspace / "data" / "truth")
    pred = RoadModel.load(extracted)
    assert len(pred.chunks) == len(truth.chunks)
    for name in ("debug_segments.geojson", "debug_groups.geojson", "debug_peaks.csv"):
        assert (extracted / name).exists()
    assert all(c.map_version == 2 for c in pred.chunks)


def test_extract_jobs_do_not_change_output(workspace, tmp_path):
    def run(out, jobs):
        assert main(["extract", "--model", str(workspace / "model.json"), "--route", str(workspace / "data" / "truth"),
                     "--tiles", str(workspace / "data" / "tiles"), "--map-version", "2", "--out", str(out),
                     "--jobs", str(jobs)]) == 0

    run(tmp_path / "a", 1)
    run(tmp_path / "b", 2)
    names = sorted(f.name for f in (tmp_path / "a").iterdir())
    assert names == sorted(f.name for f in (tmp_path / "b").iterdir())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_extract_no_linking(workspace, tmp_path):
    assert main(["extract", "--model", str(workspace / "model.json"), "--route", str(workspace / "data" / "route.geojson"),
                 "--tiles", str(workspace / "data" / "tiles"), "--map-version", "2", "--out", str(tmp_path / "nl"),
                 "--no-linking"]) == 0
    groups = json.loads((tmp_path / "nl" / "debug_groups.geojson").read_text())
    assert not any(f["properties"]["synthetic"] for f in groups["features"])


def test_extract_patch_size_mismatch(workspace, tmp_path):
    (tmp_path / "c.ini").write_text("[classify]\npatch_size = 16\n")
    assert main(["extract", "--config", str(tmp_path / "c.ini"), "--model", str(workspace / "model.json"),
                 "--route", str(workspace / "data" / "route.geojson"), "--tiles", str(workspace / "data" / "tiles"),
                 "--map-version", "2", "--out", str(tmp_path / "x")]) == 3


def test_extract_missing_tiles(workspace, tmp_path, capsys):
    tiles = tmp_path / "tiles"
    shutil.copytree(workspace / "data" / "tiles", tiles)
    start = RoadModel.load(workspace / "data" / "truth").trajectory_latlon()[0]
    px = geo.latlon_to_pixel(geo.GeoPoint(*start), 20)
    victim = tiles / "2" / f"{geo.tile_quadkey(*px.tile, 20)}.png"
    victim.unlink()
    assert main(["extract", "--model", str(workspace / "model.json"), "--route", str(workspace / "data" / "route.geojson"),
                 "--tiles", str(tiles), "--map-version", "2", "--out", str(tmp_path / "x")]) == 2
    assert victim.stem in capsys.readouterr().err


def test_eval_self(workspace, tmp_path, capsys):
    truth = workspace / "data" / "truth"
    assert main(["eval", str(truth), str(truth), "--report", str(tmp_path / "r.json"),
                 "--chunks-csv", str(tmp_path / "c.csv")]) == 0
    r = json.loads((tmp_path / "r.json").read_text())
    assert r["frac_of_truth_matched"] == r["frac_of_pred_matched"] == r["performance_geometry"] == 1.0
    assert abs(r["shift"]) < 1e-9
    assert "frac_of_truth_matched" in capsys.readouterr().out
    assert (tmp_path / "c.csv").read_text().startswith("chunk_id,")


def test_eval_matches_library(workspace, extracted, tmp_path):
    truth = workspace / "data" / "truth"
    assert main(["eval", str(truth), str(extracted), "--t-d", "0.3", "--report", str(tmp_path / "r.json")]) == 0
    lib = evaluate(RoadModel.load(truth), RoadModel.load(extracted), 0.3)
    assert (tmp_path / "r.json").read_text() == lib.to_json()
    assert json.loads(lib.to_json())["T_d"] == 0.3


def test_eval_misaligned(workspace, tmp_path):
    truth = RoadModel.load(workspace / "data" / "truth")
    RoadModel(truth.chunks[:2], truth.chunk_length).save(tmp_path / "short")
    assert main(["eval", str(workspace / "data" / "truth"), str(tmp_path / "short")]) == 3
    assert main(["eval", str(workspace / "data" / "truth"), str(tmp_path / "nothing")]) == 2


def test_render(workspace, extracted, tmp_path):
    args = ["render", "--tiles", str(workspace / "data" / "tiles"), "--map-version", "2",
            "--truth", str(workspace / "data" / "truth"), "--pred", str(extracted)]
    assert main([*args, "--out", str(tmp_path / "a.png")]) == 0
    assert main([*args, "--out", str(tmp_path / "b.png")]) == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_render_truth_positions(workspace, tmp_path):
    assert main(["render", "--truth", str(workspace / "data" / "truth"), "--out", str(tmp_path / "t.png")]) == 0
    img = np.asarray(Image.open(tmp_path / "t.png").convert("RGB")).astype(int)
    red = (img[..., 0] == 255) & (img[..., 1] == 0) & (img[..., 2] == 0)
    truth = RoadModel.load(workspace / "data" / "truth")
    pts = np.concatenate([ln.latlon() for c in truth.chunks for ln in c.lines])
    x, y = geo.latlon_to_pixel_arr(pts[:, 0], pts[:, 1], 20)
    x0, y0 = int(np.floor(x.min())) - 24, int(np.floor(y.min())) - 24
    rows, cols = np.nonzero(red)
    for ln in truth.chunks[1].boundaries:
        lx, ly = geo.latlon_to_pixel_arr(ln.latlon()[:, 0], ln.latlon()[:, 1], 20)
        mid = np.array([lx.mean() - x0 - 0.5, ly.mean() - y0 - 0.5])
        assert np.min(np.hypot(cols - mid[0], rows - mid[1])) <= 1.0


def test_render_empty_model_only_borders(workspace, tmp_path):
    truth = RoadModel.load(workspace / "data" / "truth")
    from lanemap.roadmodel import Chunk

    RoadModel(tuple(Chunk(c.id, c.map_version, (c.trajectory,)) for c in truth.chunks), 12.0).save(tmp_path / "empty")
    assert main(["render", "--tiles", str(workspace / "data" / "tiles"), "--map-version", "2",
                 "--pred", str(tmp_path / "empty"), "--out", str(tmp_path / "e.png")]) == 0
    img = np.asarray(Image.open(tmp_path / "e.png").convert("RGB")).astype(int)
    coloured = img[..., 0] != img[..., 2]
    colours = {tuple(v) for v in img[coloured]}
    assert colours <= {(0, 0, 255), (255, 255, 0)}


def test_geo_error(tmp_path):
    out = tmp_path / "dp.csv"
    assert main(["geo-error", "--lat-min", "-85", "--lat-max", "85", "--lat-step", "5", "--dx-step", "32",
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 35 * 17
    assert max(float(r["d_p"]) for r in rows) < 0.05
    assert all(float(r["d_p"]) < 1e-8 for r in rows if float(r["dx"]) == 0)
    de = list(csv.DictReader((tmp_path / "dp_de.csv").open()))
    assert len(de) == 35 * 23


def test_geo_error_bad_range(tmp_path):
    assert main(["geo-error", "--lat-max", "89", "--out", str(tmp_path / "x.csv")]) == 2


def test_usage_errors():
    assert main([]) == 2
    assert main(["nope"]) == 2
