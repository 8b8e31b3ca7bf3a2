"""Command-line pipeline driver.

Every stage is a subcommand with JSON metadata in and out; `pipeline` chains
them all.  Each command prints a single JSON summary to stdout and exits 0, or
prints an error record and exits 1.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import metrics as metrics_mod
from . import ply_io
from .contrast import FeatureMap, normalize
from .errors import FileFormatError, GeosetError
from .geometry import (BoxSpec, PlaneSpec, SyntheticSceneSpec, build_knn_graph,
                       estimate_normals, generate_scene)
from .projection import (CameraView, ViewPair, ViewProjection, look_at, mine_pairs,
                         project_geo_sets, read_cameras, render_depth, write_cameras,
                         write_depth)
from .segmentation import GeoSetPartition, SegmentationParams, segment
from .trainer import TrainConfig, build_training_data, init_embeddings, run_two_stage


def _load_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise FileFormatError(f"bad JSON: {e.msg}", path=path, byte_offset=e.pos)


def _dump_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def _emit(summary):
    print(json.dumps(summary, sort_keys=True))


# --- scene generation ---

def _parse_scene_config(doc, path):
    primitives = []
    for i, prim in enumerate(doc.get("primitives", [])):
        kind = prim.get("type")
        try:
            if kind == "plane":
                primitives.append(PlaneSpec(center=prim["center"], normal=prim["normal"],
                                            size=prim["size"], density=prim["density"]))
            elif kind == "box":
                primitives.append(BoxSpec(center=prim["center"], size=prim["size"],
                                          density=prim["density"]))
            else:
                raise FileFormatError(f"primitive {i}: unknown type '{kind}'", path=path)
        except KeyError as e:
            raise FileFormatError(f"primitive {i}: missing field {e}", path=path)
    return SyntheticSceneSpec(primitives=primitives,
                              noise_sigma=float(doc.get("noise_sigma", 0.0)),
                              seed=int(doc.get("seed", 0)))


def _orbit_views(view_cfg):
    count = int(view_cfg.get("count", 8))
    width = int(view_cfg.get("width", 32))
    height = int(view_cfg.get("height", 32))
    fx = float(view_cfg.get("fx", width))
    fy = float(view_cfg.get("fy", fx))
    cx = float(view_cfg.get("cx", (width - 1) / 2.0))
    cy = float(view_cfg.get("cy", (height - 1) / 2.0))
    orbit = view_cfg.get("orbit", {})
    center = np.asarray(orbit.get("center", [0.0, 0.0, 0.0]), dtype=np.float64)
    radius = float(orbit.get("radius", 3.0))
    elevation = float(orbit.get("height", 1.0))
    start = math.radians(float(orbit.get("start_deg", 0.0)))
    span = math.radians(float(orbit.get("span_deg", 360.0)))
    up = view_cfg.get("up", [0.0, 0.0, 1.0])

    full_circle = abs(span - 2.0 * math.pi) < 1e-9
    views = []
    for i in range(count):
        frac = i / count if full_circle else (i / max(count - 1, 1))
        angle = start + span * frac
        eye = center + np.array([radius * math.cos(angle), radius * math.sin(angle), elevation])
        pose = look_at(eye, center, up)
        views.append(CameraView(view_id=f"v{i:03d}", fx=fx, fy=fy, cx=cx, cy=cy,
                                width=width, height=height, world_to_camera=pose))
    return views


def cmd_gen_scene(args):
    doc = _load_json(args.config)
    spec = _parse_scene_config(doc, args.config)
    cloud, gt_labels = generate_scene(spec)
    views = _orbit_views(doc.get("views", {}))

    os.makedirs(args.out, exist_ok=True)
    depth_dir = os.path.join(args.out, "depth")
    os.makedirs(depth_dir, exist_ok=True)
    ply_io.write_ply(os.path.join(args.out, "scene.ply"), cloud, binary=True)
    ply_io.write_labels(os.path.join(args.out, "gt_labels.gsl"), gt_labels)

    ext = "png" if args.depth_format == "png16" else "raw"
    depth_paths = {}
    for view in views:
        view.depth = render_depth(cloud, view)
        rel = f"depth/{view.view_id}.{ext}"
        write_depth(os.path.join(args.out, rel), view.depth, args.depth_format)
        depth_paths[view.view_id] = rel
    write_cameras(os.path.join(args.out, "cameras.json"), views, depth_paths)

    _emit({"status": "ok", "points": len(cloud), "views": len(views),
           "ground_truth_sets": int(gt_labels.max()) + 1 if len(gt_labels) else 0,
           "out": args.out})
    return 0


# --- segmentation ---

def cmd_segment(args):
    cloud = ply_io.read_ply(args.input)
    degenerate = []
    if cloud.normals is None:
        cloud, degenerate = estimate_normals(cloud, k=args.knn)
    cloud = build_knn_graph(cloud, k=args.knn)
    params = SegmentationParams(k_threshold=args.k, min_size=args.min_size,
                                convexity_relaxation=args.convexity)
    partition = segment(cloud, params)
    ply_io.write_labels(args.out, partition.labels)
    _emit({"status": "ok", "points": len(cloud), "set_count": partition.set_count,
           "degenerate_normals": len(degenerate), "out": args.out})
    return 0


# --- projection artifacts ---

def write_projections(path, projections: dict, threshold: float):
    views = {}
    for view_id in sorted(projections):
        proj = projections[view_id]
        views[view_id] = {
            "sets": {str(s): [list(uv) for uv in pixels]
                     for s, pixels in proj.set_pixels.items()},
            "points": {str(p): list(uv) for p, uv in sorted(proj.point_pixels.items())},
        }
    _dump_json(path, {"threshold": threshold, "views": views})


def read_projections(path):
    doc = _load_json(path)
    if "views" not in doc:
        raise FileFormatError("projections file lacks 'views'", path=path, byte_offset=0)
    projections = {}
    for view_id, rec in doc["views"].items():
        proj = ViewProjection(view_id)
        proj.set_pixels = {int(s): sorted(tuple(uv) for uv in pixels)
                           for s, pixels in rec["sets"].items()}
        proj.point_pixels = {int(p): tuple(uv) for p, uv in rec["points"].items()}
        # pixels belong to exactly one set, so the point-to-set map is implied
        pixel_set = {uv: s for s, pixels in proj.set_pixels.items() for uv in pixels}
        proj.point_sets = {p: pixel_set[uv] for p, uv in proj.point_pixels.items()}
        projections[view_id] = proj
    return projections


def cmd_project(args):
    cloud = ply_io.read_ply(args.scene)
    labels = ply_io.read_labels(args.sets)
    partition = GeoSetPartition(labels, int(labels.max()) + 1 if len(labels) else 0)
    views = read_cameras(args.cameras)
    projections = {v.view_id: project_geo_sets(cloud, partition, v, args.threshold)
                   for v in views}
    write_projections(args.out, projections, args.threshold)
    pixel_counts = {v: sum(len(p) for p in proj.set_pixels.values())
                    for v, proj in projections.items()}
    _emit({"status": "ok", "views": len(views),
           "total_projected_pixels": sum(pixel_counts.values()), "out": args.out})
    return 0


# --- pair mining ---

def write_pairs(path, pairs, stride, overlap_min):
    _dump_json(path, {"stride": stride, "overlap_min": overlap_min,
                      "pairs": [{"view_m": p.view_m, "view_n": p.view_n,
                                 "overlap": p.overlap} for p in pairs]})


def read_pairs(path):
    doc = _load_json(path)
    return [ViewPair(rec["view_m"], rec["view_n"], float(rec["overlap"]))
            for rec in doc.get("pairs", [])]


def cmd_mine_pairs(args):
    views = read_cameras(args.cameras)
    pairs = mine_pairs(views, frame_stride=args.stride, overlap_min=args.overlap_min)
    write_pairs(args.out, pairs, args.stride, args.overlap_min)
    _emit({"status": "ok", "candidates": len(views[::args.stride]),
           "pair_count": len(pairs), "out": args.out})
    return 0


# --- training ---

def _train_config(doc) -> TrainConfig:
    allowed = set(TrainConfig.__dataclass_fields__)
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown train config fields: {sorted(unknown)}")
    return TrainConfig(**doc)


def load_embedding(path):
    sidecar = str(path) + ".json"
    try:
        with open(sidecar) as f:
            meta = json.load(f)
    except FileNotFoundError:
        raise FileFormatError("missing embedding sidecar", path=sidecar)
    h, w, c = int(meta["height"]), int(meta["width"]), int(meta["channels"])
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) != 4 * h * w * c:
        raise FileFormatError(f"embedding size mismatch: expected {4 * h * w * c} bytes",
                              path=path, byte_offset=len(raw))
    return np.frombuffer(raw, dtype="<f4").reshape(h, w, c).astype(np.float64)


def save_embedding(path, array):
    array = np.asarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(array.tobytes())
    with open(str(path) + ".json", "w") as f:
        json.dump({"height": array.shape[0], "width": array.shape[1],
                   "channels": array.shape[2]}, f, sort_keys=True)
        f.write("\n")


def load_point_features(path):
    """Raw float32 (P, C) table with JSON sidecar {count, channels}; rows renormalized."""
    sidecar = str(path) + ".json"
    try:
        with open(sidecar) as f:
            meta = json.load(f)
    except FileNotFoundError:
        raise FileFormatError("missing point-feature sidecar", path=sidecar)
    p, c = int(meta["count"]), int(meta["channels"])
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) != 4 * p * c:
        raise FileFormatError(f"point-feature size mismatch: expected {4 * p * c} bytes",
                              path=path, byte_offset=len(raw))
    table = np.frombuffer(raw, dtype="<f4").reshape(p, c).astype(np.float64)
    norms = np.linalg.norm(table, axis=1, keepdims=True)
    return table / np.maximum(norms, 1e-12)


def _final_metrics(table, data, epsilon):
    """Mean intra/cross cosine and per-image coding rate over trainable views."""
    intra, cross, rates = [], [], []
    for view in sorted(data.view_shapes):
        fmap = normalize(FeatureMap(table.raw[view]))
        proj = data.projections[view]
        if any(len(p) >= 2 for p in proj.set_pixels.values()):
            intra.append(metrics_mod.intra_set_cosine(fmap, proj))
        if len(proj.set_pixels) >= 2:
            cross.append(metrics_mod.cross_set_cosine(fmap, proj))
        labels = metrics_mod.projection_label_map(proj, *data.view_shapes[view])
        if (labels != metrics_mod.UNLABELED).any():
            rates.append(metrics_mod.per_image_coding_rate(fmap, labels, epsilon))
    return {
        "intra_set_cosine": float(np.mean(intra)) if intra else None,
        "cross_set_cosine": float(np.mean(cross)) if cross else None,
        "per_image_coding_rate": float(np.mean(rates)) if rates else None,
    }


def run_training(scene, sets, cameras, pairs_path, out_dir, config_doc,
                 point_features_path=None, min_pixels=5, pixel_cap=4096,
                 threshold=0.05, epsilon=metrics_mod.DEFAULT_EPSILON):
    cloud = ply_io.read_ply(scene)
    labels = ply_io.read_labels(sets)
    partition = GeoSetPartition(labels, int(labels.max()) + 1 if len(labels) else 0)
    views = read_cameras(cameras)
    mined = read_pairs(pairs_path)
    config = _train_config(config_doc)
    point_features = (load_point_features(point_features_path)
                      if point_features_path else None)

    data = build_training_data(cloud, partition, views, mined,
                               point_features=point_features, min_pixels=min_pixels,
                               pixel_cap=pixel_cap, seed=config.seed, threshold=threshold)
    table, log = run_two_stage(data, config)

    os.makedirs(out_dir, exist_ok=True)
    emb_dir = os.path.join(out_dir, "embeddings")
    os.makedirs(emb_dir, exist_ok=True)
    for view in sorted(table.raw):
        save_embedding(os.path.join(emb_dir, f"{view}.f32"), table.raw[view])
    with open(os.path.join(out_dir, "training_log.jsonl"), "w") as f:
        for record in log:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    initial = _final_metrics(init_embeddings(data.view_shapes, config), data, epsilon)
    final = _final_metrics(table, data, epsilon)
    steps = sum(1 for r in log if "loss_kind" in r)
    return {"pairs": len(data.pairs), "loss_records": steps,
            "initial": initial, "final": final, "out": out_dir}


def cmd_train(args):
    config_doc = _load_json(args.config) if args.config else {}
    summary = run_training(args.scene, args.sets, args.cameras, args.pairs, args.out,
                           config_doc, point_features_path=args.point_features,
                           min_pixels=args.min_pixels, pixel_cap=args.pixel_cap,
                           threshold=args.threshold)
    summary["status"] = "ok"
    _emit(summary)
    return 0


# --- metrics ---

def cmd_metrics(args):
    projections = read_projections(args.projections)
    records = []
    pca_dir = args.pca_dir
    if pca_dir:
        os.makedirs(pca_dir, exist_ok=True)
    for name in sorted(os.listdir(args.embeddings)):
        if not name.endswith(".f32"):
            continue
        view_id = name[:-4]
        raw = load_embedding(os.path.join(args.embeddings, name))
        fmap = normalize(FeatureMap(raw))
        record = {"image_id": view_id, "epsilon": args.epsilon,
                  "coding_rate": None, "intra_set_cosine": None}
        proj = projections.get(view_id)
        if proj is not None:
            labels = metrics_mod.projection_label_map(proj, raw.shape[0], raw.shape[1])
            if (labels != metrics_mod.UNLABELED).any():
                record["coding_rate"] = metrics_mod.per_image_coding_rate(
                    fmap, labels, args.epsilon)
            if any(len(p) >= 2 for p in proj.set_pixels.values()):
                record["intra_set_cosine"] = metrics_mod.intra_set_cosine(fmap, proj)
        records.append(record)
        if pca_dir:
            metrics_mod.write_ppm(os.path.join(pca_dir, f"{view_id}.ppm"),
                                  metrics_mod.pca_embed(fmap))
    with open(args.out, "w") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    _emit({"status": "ok", "images": len(records), "out": args.out})
    return 0


# --- pipeline ---

def cmd_pipeline(args):
    doc = _load_json(args.config)
    out = args.out
    os.makedirs(out, exist_ok=True)

    spec = _parse_scene_config(doc.get("scene", {}), args.config)
    cloud, gt_labels = generate_scene(spec)
    views = _orbit_views(doc.get("scene", {}).get("views", {}))
    depth_dir = os.path.join(out, "depth")
    os.makedirs(depth_dir, exist_ok=True)
    ply_io.write_ply(os.path.join(out, "scene.ply"), cloud, binary=True)
    ply_io.write_labels(os.path.join(out, "gt_labels.gsl"), gt_labels)
    depth_paths = {}
    for view in views:
        view.depth = render_depth(cloud, view)
        rel = f"depth/{view.view_id}.raw"
        write_depth(os.path.join(out, rel), view.depth, "raw")
        depth_paths[view.view_id] = rel
    write_cameras(os.path.join(out, "cameras.json"), views, depth_paths)

    seg_cfg = doc.get("segmentation", {})
    knn = int(seg_cfg.get("knn", 12))
    seg_cloud = cloud
    degenerate = []
    if seg_cloud.normals is None:
        seg_cloud, degenerate = estimate_normals(seg_cloud, k=knn)
    seg_cloud = build_knn_graph(seg_cloud, k=knn)
    params = SegmentationParams(
        k_threshold=float(seg_cfg.get("k_threshold", 0.05)),
        min_size=int(seg_cfg.get("min_size", 20)),
        convexity_relaxation=bool(seg_cfg.get("convexity_relaxation", False)))
    partition = segment(seg_cloud, params)
    ply_io.write_labels(os.path.join(out, "sets.gsl"), partition.labels)

    proj_cfg = doc.get("projection", {})
    threshold = float(proj_cfg.get("threshold", 0.05))
    projections = {v.view_id: project_geo_sets(cloud, partition, v, threshold)
                   for v in views}
    write_projections(os.path.join(out, "projections.json"), projections, threshold)

    mine_cfg = doc.get("mining", {})
    stride = int(mine_cfg.get("stride", 25))
    overlap_min = float(mine_cfg.get("overlap_min", 0.3))
    pairs = mine_pairs(views, frame_stride=stride, overlap_min=overlap_min)
    write_pairs(os.path.join(out, "pairs.json"), pairs, stride, overlap_min)

    train_dir = os.path.join(out, "train")
    train_summary = run_training(
        os.path.join(out, "scene.ply"), os.path.join(out, "sets.gsl"),
        os.path.join(out, "cameras.json"), os.path.join(out, "pairs.json"),
        train_dir, doc.get("train", {}),
        min_pixels=int(proj_cfg.get("min_pixels", 5)),
        pixel_cap=int(proj_cfg.get("pixel_cap", 4096)),
        threshold=threshold,
        epsilon=float(doc.get("metrics", {}).get("epsilon", metrics_mod.DEFAULT_EPSILON)))

    metrics_args = argparse.Namespace(
        projections=os.path.join(out, "projections.json"),
        embeddings=os.path.join(train_dir, "embeddings"),
        out=os.path.join(out, "metrics.jsonl"),
        epsilon=float(doc.get("metrics", {}).get("epsilon", metrics_mod.DEFAULT_EPSILON)),
        pca_dir=os.path.join(out, "pca"))
    # reuse the metrics command body without re-emitting its summary
    _silent_metrics(metrics_args)

    _emit({"status": "ok", "points": len(cloud), "views": len(views),
           "set_count": partition.set_count, "degenerate_normals": len(degenerate),
           "pair_count": len(pairs),
           "final_intra_set_cosine": train_summary["final"]["intra_set_cosine"],
           "final_cross_set_cosine": train_summary["final"]["cross_set_cosine"],
           "initial_coding_rate": train_summary["initial"]["per_image_coding_rate"],
           "final_coding_rate": train_summary["final"]["per_image_coding_rate"],
           "out": out})
    return 0


def _silent_metrics(args):
    stdout = sys.stdout
    sys.stdout = open(os.devnull, "w")
    try:
        cmd_metrics(args)
    finally:
        sys.stdout.close()
        sys.stdout = stdout


# --- entry point ---

def build_parser():
    parser = argparse.ArgumentParser(prog="geoset",
                                     description="Geometric consistency set pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic scene with posed views")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--depth-format", choices=["raw", "png16"], default="raw")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("segment", help="over-segment a point cloud into geo sets")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=float, default=0.05)
    p.add_argument("--min-size", type=int, default=20)
    p.add_argument("--convexity", action="store_true")
    p.add_argument("--knn", type=int, default=12)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("project", help="project geo sets into posed views")
    p.add_argument("--scene", required=True)
    p.add_argument("--sets", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.05)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("mine-pairs", help="mine overlapping view pairs")
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int, default=25)
    p.add_argument("--overlap-min", type=float, default=0.3)
    p.set_defaults(func=cmd_mine_pairs)

    p = sub.add_parser("train", help="run two-stage contrastive training")
    p.add_argument("--scene", required=True)
    p.add_argument("--sets", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--point-features")
    p.add_argument("--min-pixels", type=int, default=5)
    p.add_argument("--pixel-cap", type=int, default=4096)
    p.add_argument("--threshold", type=float, default=0.05)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("metrics", help="representation metrics over saved embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--projections", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon", type=float, default=metrics_mod.DEFAULT_EPSILON)
    p.add_argument("--pca-dir")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileFormatError as e:
        _emit({"status": "error",
               "error": {"message": e.args[0], "path": e.path,
                         "byte_offset": e.byte_offset}})
        return 1
    except (GeosetError, ValueError, OSError, KeyError) as e:
        _emit({"status": "error", "error": {"message": str(e), "path": None,
                                            "byte_offset": None}})
        return 1


if __name__ == "__main__":
    sys.exit(main())
