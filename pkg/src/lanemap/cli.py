"""Command line entry point: ``lanemap <subcommand>``.

Exit codes: 0 success, 2 usage or input error, 3 data or consistency error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import classify, geo, link, pipeline, segment, synth
from .config import ConfigError, PipelineConfig, load_config
from .evaluate import AlignmentError, evaluate
from .roadmodel import BoundaryLine, ChunkParseError, RoadModel, RoadSurface, RouteFrame
from .tiles import Canvas, Raster, TileFetchError, TileSource, decode_image, mosaic_route

log = logging.getLogger("lanemap")


class InputError(Exception):
    """Bad arguments or missing/unreadable inputs (exit 2)."""


class DataError(Exception):
    """Inputs load but are inconsistent or unusable (exit 3)."""


# -- helpers -----------------------------------------------------------------------------


def _config(args, **overrides) -> PipelineConfig:
    text = ""
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise InputError(f"cannot read config {args.config}: {exc.strerror}") from None
    try:
        return load_config(text, overrides)
    except ConfigError as exc:
        raise InputError(str(exc)) from None


def _load_model_dir(path) -> RoadModel:
    p = Path(path)
    if not (p / "road.json").exists():
        raise InputError(f"{p} is not a road model directory (no road.json)")
    try:
        return RoadModel.load(p)
    except (ChunkParseError, ValueError, OSError) as exc:
        raise InputError(f"cannot load road model {p}: {exc}") from None


def _map_version_of(data_dir: Path, default: int) -> int:
    ini = data_dir / "scene.ini"
    if ini.exists():
        return synth.SceneSpec.from_config(ini.read_text()).map_version
    return default


def _read_tile_dir(tiles_dir: Path, map_version: int):
    d = tiles_dir / str(map_version)
    if not d.is_dir():
        raise InputError(f"no tiles for map version {map_version} under {tiles_dir}")
    out = []
    for f in sorted(d.glob("*.png")):
        qk = f.stem
        tx, ty, level = geo.quadkey_to_tile(qk)
        out.append((qk, Raster(decode_image(f.read_bytes(), qk), (tx, ty, level))))
    if not out:
        raise InputError(f"no tiles in {d}")
    return out


def _read_route(path) -> BoundaryLine:
    p = Path(path)
    if (p / "road.json").exists():
        m = _load_model_dir(p)
        return BoundaryLine.from_array(m.chunks[0].trajectory.line_id, "trajectory", m.trajectory_latlon())
    try:
        doc = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read route {p}: {exc}") from None
    geom = doc.get("geometry", doc)
    if doc.get("type") == "FeatureCollection":
        geom = doc["features"][0]["geometry"]
    if geom.get("type") != "LineString":
        raise InputError(f"route {p} must be a GeoJSON LineString")
    lonlat = np.asarray(geom["coordinates"], dtype=float)
    import uuid

    line_id = str(uuid.uuid5(uuid.NAMESPACE_URL, p.resolve().as_uri()))
    return BoundaryLine.from_array(line_id, "trajectory", lonlat[:, ::-1])


# -- subcommands -----------------------------------------------------------------------


def cmd_synth(args) -> int:
    try:
        spec = synth.SceneSpec.from_config(Path(args.spec).read_text())
    except OSError as exc:
        raise InputError(f"cannot read spec {args.spec}: {exc.strerror}") from None
    except synth.SceneError as exc:
        raise InputError(f"invalid scene spec: {exc}") from None
    scene = synth.generate_scene(spec)
    if args.occlusion:
        scene.tiles = synth.corrupt(scene.tiles, scene.painted, args.occlusion, spec.seed)
    scene.save(args.out)
    print(f"wrote {len(scene.tiles)} tiles and {len(scene.truth.chunks)} chunks to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args, **{"classify.patch_size": args.patch_size, "classify.stride": args.stride,
                           "classify.feature_kind": args.feature, "forest.n_trees": args.trees,
                           "run.cv_folds": args.cv_folds, "run.seed": args.seed})
    data = Path(args.data)
    labels = data / "painted" if (data / "painted").exists() else data / "truth"
    if not labels.exists():
        raise InputError(f"{data} has no truth directory")
    if not (data / "surface.json").exists():
        raise InputError(f"{data} has no surface.json")
    markings = _load_model_dir(labels)
    surface = RoadSurface.from_json((data / "surface.json").read_text())
    tiles = _read_tile_dir(data / "tiles", _map_version_of(data, cfg.tiles.map_version))
    forest_cfg = classify.ForestConfig(**{**cfg.forest.__dict__, "seed": cfg.stage_seed("train")})
    p = cfg.patch
    try:
        model, X, Y = pipeline.train_from_tiles(tiles, markings, surface, p.patch_size, p.stride, p.feature_kind, forest_cfg)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    model.save(args.model_out)
    print(f"trained {model.n_trees} trees on {len(Y)} patches ({int(Y.sum())} positive); model -> {args.model_out}")
    if cfg.run.cv_folds:
        cv_cfg = classify.ForestConfig(**{**cfg.forest.__dict__, "seed": cfg.stage_seed("cv")})
        try:
            cv = classify.cross_validate(X, Y, cv_cfg, cfg.run.cv_folds)
        except ValueError as exc:
            raise DataError(str(exc)) from None
        print(f"{cfg.run.cv_folds}-fold CV precision {cv.precision:.4f} recall {cv.recall:.4f}")
    return 0


def cmd_extract(args) -> int:
    cfg = _config(args, **{"run.jobs": args.jobs, "tiles.map_version": args.map_version,
                           "tiles.directory": args.tiles, "tiles.cache_dir": args.cache_dir})
    try:
        model = classify.ForestModel.load(args.model)
    except OSError as exc:
        raise InputError(f"cannot read model {args.model}: {exc.strerror}") from None
    except (ValueError, KeyError) as exc:
        raise DataError(f"bad model file {args.model}: {exc}") from None
    if args.config and model.patch_size != cfg.patch.patch_size:
        raise DataError(f"model patch size {model.patch_size} does not match configured {cfg.patch.patch_size}")
    route = _read_route(args.route)
    tc = cfg.tiles
    if tc.mode == "directory" and not tc.directory:
        raise InputError("--tiles is required for directory tile sources")
    kwargs = {"mode": tc.mode, "map_version": tc.map_version, "cache_dir": tc.cache_dir,
              "directory": tc.directory}
    if tc.url_template:
        kwargs["url_template"] = tc.url_template
    src = TileSource(**kwargs)
    try:
        tiles = mosaic_route(src, route, tc.level, buffer_m=cfg.run.corridor_half_width + 2.0)
    except TileFetchError as exc:
        raise InputError(f"missing {exc}") from None
    surface = RoadSurface.from_json(Path(args.surface).read_text()) if args.surface else None
    res = pipeline.extract_road_model(
        tiles, route, model, surface=surface, corridor_half_width=cfg.run.corridor_half_width,
        chunk_length=cfg.run.chunk_length, stride=cfg.patch.stride, seg_cfg=cfg.segment, link_cfg=cfg.link,
        linking=not args.no_linking, map_version=tc.map_version, jobs=cfg.run.jobs,
    )
    out = Path(args.out)
    res.model.save(out)
    segs = [s for v in res.segments.values() for s in v]
    segment.dump_segments_geojson(out / "debug_segments.geojson", segs, tc.level)
    (out / "debug_groups.geojson").write_text(json.dumps(link.groups_geojson(res.groups, res.partition.frame)))
    segment.write_peaks_csv(out / "debug_peaks.csv", res.peaks)
    labels = {f: sum(g.function == f for g in res.groups) for f in link.FUNCTIONS}
    print(f"{len(res.model.chunks)} chunks, {len(segs)} segments, groups {labels}; model -> {out}")
    return 0


def cmd_eval(args) -> int:
    truth = _load_model_dir(args.truth)
    pred = _load_model_dir(args.pred)
    try:
        rep = evaluate(truth, pred, args.t_d)
    except AlignmentError as exc:
        raise DataError(str(exc)) from None
    sys.stdout.write(rep.table())
    if args.report:
        Path(args.report).write_text(rep.to_json())
    if args.chunks_csv:
        Path(args.chunks_csv).write_text(rep.chunks_csv())
    return 0


def _render_overlay(tiles, level: int, truth: RoadModel | None, preds: list[RoadModel], margin: int = 24) -> Image.Image:
    models = [m for m in [truth, *preds] if m is not None]
    if not models:
        raise InputError("nothing to render")
    pts = np.concatenate([ln.latlon() for m in models for c in m.chunks for ln in c.lines])
    x, y = geo.latlon_to_pixel_arr(pts[:, 0], pts[:, 1], level)
    x0, y0 = int(np.floor(x.min())) - margin, int(np.floor(y.min())) - margin
    w, h = int(np.ceil(x.max())) + margin - x0, int(np.ceil(y.max())) + margin - y0
    base = Canvas(tiles, level).window(x0, y0, w, h) if tiles else np.zeros((h, w), np.float32)
    img = Image.fromarray(np.clip(np.rint(base), 0, 255).astype(np.uint8)).convert("RGB")
    draw = ImageDraw.Draw(img)

    def local(latlon):
        px, py = geo.latlon_to_pixel_arr(latlon[:, 0], latlon[:, 1], level)
        return [(float(a - x0 - 0.5), float(b - y0 - 0.5)) for a, b in zip(px, py)]

    ref = models[0]
    frame = RouteFrame(ref.trajectory_latlon())
    for c in ref.chunks:  # chunk borders
        s0, _ = frame.latlon_to_st(c.trajectory.latlon()[:1])
        border = frame.st_to_latlon(np.array([s0[0], s0[0]]), np.array([-12.0, 12.0]))
        draw.line(local(border), fill=(0, 0, 255), width=1)
    for p in preds:
        for c in p.chunks:
            for ln in c.boundaries:
                draw.line(local(ln.latlon()), fill=(0, 255, 0), width=1)
    if truth is not None:
        for c in truth.chunks:
            for ln in c.boundaries:
                draw.line(local(ln.latlon()), fill=(255, 0, 0), width=1)
    for px, py in local(ref.trajectory_latlon()):
        draw.ellipse((px - 1, py - 1, px + 1, py + 1), fill=(255, 255, 0))
    return img


def cmd_render(args) -> int:
    truth = _load_model_dir(args.truth) if args.truth else None
    preds = [_load_model_dir(p) for p in args.pred or []]
    tiles = _read_tile_dir(Path(args.tiles), args.map_version) if args.tiles else []
    img = _render_overlay(tiles, args.level, truth, preds)
    img.save(args.out, format="PNG", optimize=False)
    print(f"wrote {img.width}x{img.height} overlay to {args.out}")
    return 0


def cmd_geo_error(args) -> int:
    if args.lat_step <= 0 or args.dx_step <= 0 or args.lat_min > args.lat_max:
        raise InputError("bad grid ranges")
    if max(abs(args.lat_min), abs(args.lat_max)) > 85.0:
        raise InputError("latitudes must lie within [-85, 85]")
    lats = np.arange(args.lat_min, args.lat_max + 1e-9, args.lat_step)
    dxs = np.arange(-args.dx_max, args.dx_max + 1e-9, args.dx_step)
    out = Path(args.out)
    worst = 0.0
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["lat", "dx", "dy", "level", "d_p"])
        for lat in lats:
            dp = geo.mercator_cartesian_error_dp_arr(float(lat), dxs, np.full_like(dxs, args.dy), args.level)
            worst = max(worst, float(dp.max()))
            for dx, v in zip(dxs, dp):
                w.writerow([f"{lat:.6g}", f"{dx:.6g}", f"{args.dy:.6g}", args.level, f"{v:.9f}"])
    de_path = out.with_name(out.stem + "_de.csv")
    with open(de_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["lat", "level", "tile_x", "tile_y", "d_e"])
        for lat in lats:
            for level in range(geo.MIN_LEVEL, geo.MAX_LEVEL + 1):
                px = geo.latlon_to_pixel(geo.GeoPoint(float(lat), 0.0), level)
                tx, ty = px.tile
                w.writerow([f"{lat:.6g}", level, tx, ty, f"{geo.tile_span_error_de(tx, ty, level):.9f}"])
    print(f"max d_p {worst:.6f} m over {len(lats) * len(dxs)} cells -> {out}; d_e table -> {de_path}")
    return 0


# -- argument parsing --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lanemap", description="Lane-boundary extraction from overhead imagery.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("spec", help="scene INI file with a [scene] section")
    p.add_argument("out", help="output directory")
    p.add_argument("--occlusion", type=float, default=0.0, help="fraction of marking length to hide under vehicles")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the patch classifier")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="scene directory with tiles/, truth/ and surface.json")
    p.add_argument("--model-out", required=True)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--feature", choices=classify.FEATURE_KINDS)
    p.add_argument("--trees", type=int)
    p.add_argument("--cv-folds", type=int, help="0 disables cross validation")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="extract a lane model along a route")
    p.add_argument("--config")
    p.add_argument("--model", required=True)
    p.add_argument("--route", required=True, help="GeoJSON LineString or a road model directory")
    p.add_argument("--tiles", help="tile directory (<dir>/<map version>/<quadkey>.png)")
    p.add_argument("--map-version", type=int)
    p.add_argument("--cache-dir")
    p.add_argument("--surface", help="surface.json; defaults to a corridor around the route")
    p.add_argument("--out", required=True)
    p.add_argument("--no-linking", action="store_true", help="skip interpolation of missing lines")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="score a predicted model against ground truth")
    p.add_argument("truth")
    p.add_argument("pred")
    p.add_argument("--t-d", type=float, default=0.5)
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--chunks-csv", help="write per-chunk scores here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="draw models over imagery")
    p.add_argument("--tiles")
    p.add_argument("--map-version", type=int, default=1)
    p.add_argument("--level", type=int, default=20)
    p.add_argument("--truth")
    p.add_argument("--pred", action="append")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("geo-error", help="tabulate Mercator coordinate errors")
    p.add_argument("--level", type=int, default=20)
    p.add_argument("--lat-min", type=float, default=-85.0)
    p.add_argument("--lat-max", type=float, default=85.0)
    p.add_argument("--lat-step", type=float, default=1.0)
    p.add_argument("--dx-max", type=float, default=256.0)
    p.add_argument("--dx-step", type=float, default=16.0)
    p.add_argument("--dy", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_geo_error)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, AlignmentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (FileNotFoundError, geo.GeoDomainError, ChunkParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
