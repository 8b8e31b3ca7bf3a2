"""Pinhole projection of geometric consistency sets into posed views.

Covers point projection with depth-validity filtering, z-buffer rendering of
synthetic depth maps, view overlap estimation, frame-pair mining, and the
match-index construction that feeds the contrastive losses.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FileFormatError
from .geometry import PointCloud
from .segmentation import GeoSetPartition

DEPTH_THRESHOLD = 0.05  # meters


@dataclass
class CameraView:
    """A posed pinhole camera, row-major world_to_camera, optional depth map."""

    view_id: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray
    depth: np.ndarray | None = None

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float64)

    def validate(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"view {self.view_id}: focal lengths must be positive")
        R = self.world_to_camera[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-5):
            raise ValueError(f"view {self.view_id}: rotation block is not orthonormal")
        if self.depth is not None:
            if self.depth.shape != (self.height, self.width):
                raise ValueError(f"view {self.view_id}: depth shape mismatch")
            if self.depth.min() < 0:
                raise ValueError(f"view {self.view_id}: negative depth values")

    def to_camera(self, points):
        """World points (N,3) to camera frame."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        R = self.world_to_camera[:3, :3]
        t = self.world_to_camera[:3, 3]
        return points @ R.T + t

    def to_world(self, points_cam):
        points_cam = np.atleast_2d(np.asarray(points_cam, dtype=np.float64))
        R = self.world_to_camera[:3, :3]
        t = self.world_to_camera[:3, 3]
        return (points_cam - t) @ R


@dataclass
class ViewProjection:
    """Per-view projection of a partition: set pixels plus point-to-pixel map."""

    view_id: str
    set_pixels: dict[int, list[tuple[int, int]]] = field(default_factory=dict)
    point_pixels: dict[int, tuple[int, int]] = field(default_factory=dict)
    point_sets: dict[int, int] = field(default_factory=dict)


@dataclass(frozen=True)
class ViewPair:
    view_m: str
    view_n: str
    overlap: float


@dataclass
class MatchIndex:
    """Pixel pairs M_p and set tuples M_s for one view pair."""

    view_m: str
    view_n: str
    pixel_pairs: list[tuple[tuple[int, int], tuple[int, int]]] = field(default_factory=list)
    set_tuples: list[tuple[int, str, str]] = field(default_factory=list)


def _round_half_up(x):
    # np.round does banker's rounding; pixel grids want the symmetric half-up rule
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def project_point(p_world, view: CameraView):
    """Project one world point; None when behind the camera or out of bounds."""
    cam = view.to_camera(p_world)[0]
    z = cam[2]
    if z <= 0:
        return None
    u = int(_round_half_up(view.fx * cam[0] / z + view.cx))
    v = int(_round_half_up(view.fy * cam[1] / z + view.cy))
    if not (0 <= u < view.width and 0 <= v < view.height):
        return None
    return u, v, float(z)


def depth_validate(u, v, z, view: CameraView, threshold: float = DEPTH_THRESHOLD) -> bool:
    """True iff the stored depth exists and agrees with z within threshold."""
    d = view.depth[v, u]
    return d > 0 and abs(z - d) <= threshold


def _project_all(cloud: PointCloud, view: CameraView):
    """Vectorized projection of the whole cloud.

    Returns (valid mask, u, v, z) where valid means in front, in bounds and,
    when the view has depth, depth-validated.
    """
    cam = view.to_camera(cloud.positions)
    z = cam[:, 2]
    front = z > 0
    zs = np.where(front, z, 1.0)
    u = _round_half_up(view.fx * cam[:, 0] / zs + view.cx)
    v = _round_half_up(view.fy * cam[:, 1] / zs + view.cy)
    valid = front & (u >= 0) & (u < view.width) & (v >= 0) & (v < view.height)
    return valid, u, v, z


def render_depth(cloud: PointCloud, view: CameraView):
    """Z-buffer the cloud into a depth map (0 where nothing projects)."""
    valid, u, v, z = _project_all(cloud, view)
    depth = np.zeros((view.height, view.width), dtype=np.float64)
    idx = np.flatnonzero(valid)
    # nearest point wins; iterate in descending z so the smallest lands last
    order = idx[np.argsort(-z[idx], kind="stable")]
    depth[v[order], u[order]] = z[order]
    return depth


def project_geo_sets(cloud: PointCloud, partition: GeoSetPartition, view: CameraView,
                     threshold: float = DEPTH_THRESHOLD) -> ViewProjection:
    """Project every set into the view with depth validation and z-buffer conflicts.

    When points from different sets land on the same pixel the nearest point's
    set claims it (ties broken by point index); losers are dropped entirely.
    """
    if len(partition.labels) != len(cloud):
        raise ValueError("partition does not match cloud")
    if view.depth is None:
        raise ValueError(f"view {view.view_id} has no depth map")
    valid, u, v, z = _project_all(cloud, view)
    idx = np.flatnonzero(valid)
    if idx.size:
        d = view.depth[v[idx], u[idx]]
        idx = idx[(d > 0) & (np.abs(z[idx] - d) <= threshold)]

    proj = ViewProjection(view.view_id)
    if not idx.size:
        return proj

    # winner set per pixel: (z, point index) lexicographic minimum
    pix = v[idx] * view.width + u[idx]
    order = np.lexsort((idx, z[idx], pix))
    idx, pix = idx[order], pix[order]
    first = np.r_[True, pix[1:] != pix[:-1]]
    winner_set = dict(zip(pix[first].tolist(),
                          partition.labels[idx[first]].astype(np.int64).tolist()))

    labels = partition.labels[idx].astype(np.int64)
    keep = labels == np.fromiter((winner_set[p] for p in pix.tolist()),
                                 dtype=np.int64, count=len(pix))
    for point, p, s in zip(idx[keep].tolist(), pix[keep].tolist(), labels[keep].tolist()):
        uv = (p % view.width, p // view.width)
        proj.point_pixels[point] = uv
        proj.point_sets[point] = s
        proj.set_pixels.setdefault(s, set()).add(uv)
    proj.set_pixels = {s: sorted(pxs) for s, pxs in sorted(proj.set_pixels.items())}
    return proj


def compute_overlap(view_m: CameraView, view_n: CameraView,
                    threshold: float = DEPTH_THRESHOLD) -> float:
    """Symmetric pixel-overlap fraction between two depth-bearing views."""
    return min(_directed_overlap(view_m, view_n, threshold),
               _directed_overlap(view_n, view_m, threshold))


def _directed_overlap(src: CameraView, dst: CameraView, threshold):
    vv, uu = np.nonzero(src.depth > 0)
    if not len(vv):
        return 0.0
    z = src.depth[vv, uu]
    cam = np.stack([(uu - src.cx) * z / src.fx, (vv - src.cy) * z / src.fy, z], axis=1)
    world = src.to_world(cam)

    cam_n = dst.to_camera(world)
    zn = cam_n[:, 2]
    front = zn > 0
    zs = np.where(front, zn, 1.0)
    un = _round_half_up(dst.fx * cam_n[:, 0] / zs + dst.cx)
    vn = _round_half_up(dst.fy * cam_n[:, 1] / zs + dst.cy)
    ok = front & (un >= 0) & (un < dst.width) & (vn >= 0) & (vn < dst.height)
    if ok.any():
        d = dst.depth[vn[ok], un[ok]]
        hits = np.count_nonzero((d > 0) & (np.abs(zn[ok] - d) <= threshold))
    else:
        hits = 0
    return hits / len(vv)


def mine_pairs(views: list[CameraView], frame_stride: int = 25,
               overlap_min: float = 0.3, threshold: float = DEPTH_THRESHOLD) -> list[ViewPair]:
    """Subsample every frame_stride-th view, keep pairs with overlap strictly above the minimum."""
    if frame_stride < 1:
        raise ValueError("frame_stride must be at least 1")
    subsample = views[::frame_stride]
    pairs = []
    for a in range(len(subsample)):
        for b in range(a + 1, len(subsample)):
            ov = compute_overlap(subsample[a], subsample[b], threshold)
            if ov > overlap_min:
                pairs.append(ViewPair(subsample[a].view_id, subsample[b].view_id, ov))
    return pairs


def build_match_index(proj_m: ViewProjection, proj_n: ViewProjection,
                      min_pixels: int = 5, pixel_cap: int = 4096, seed: int = 0) -> MatchIndex:
    """Pixel pairs from shared valid points plus set tuples visible in both views."""
    index = MatchIndex(proj_m.view_id, proj_n.view_id)

    for set_id in sorted(proj_m.set_pixels):
        if set_id in proj_n.set_pixels \
                and len(proj_m.set_pixels[set_id]) >= min_pixels \
                and len(proj_n.set_pixels[set_id]) >= min_pixels:
            index.set_tuples.append((set_id, proj_m.view_id, proj_n.view_id))

    shared = sorted(proj_m.point_pixels.keys() & proj_n.point_pixels.keys())
    if len(shared) > pixel_cap:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(shared), size=pixel_cap, replace=False)
        shared = [shared[i] for i in np.sort(chosen)]
    index.pixel_pairs = [(proj_m.point_pixels[p], proj_n.point_pixels[p]) for p in shared]
    return index


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Row-major world_to_camera for a camera at eye looking toward target (+z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    forward = forward / norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])  # camera x right, y down, z forward
    t = -R @ eye
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = t
    return M


# --- camera and depth file formats ---

def write_depth_raw(path, depth):
    """Raw little-endian float32 meters plus a JSON size sidecar."""
    depth = np.asarray(depth, dtype="<f4")
    with open(path, "wb") as f:
        f.write(depth.tobytes())
    with open(str(path) + ".json", "w") as f:
        json.dump({"height": depth.shape[0], "width": depth.shape[1]}, f, sort_keys=True)
        f.write("\n")


def read_depth_raw(path):
    sidecar = str(path) + ".json"
    try:
        with open(sidecar) as f:
            meta = json.load(f)
    except FileNotFoundError:
        raise FileFormatError("missing depth sidecar", path=sidecar)
    except json.JSONDecodeError as e:
        raise FileFormatError(f"bad depth sidecar: {e.msg}", path=sidecar, byte_offset=e.pos)
    h, w = int(meta["height"]), int(meta["width"])
    with open(path, "rb") as f:
        raw = f.read()
    expected = 4 * h * w
    if len(raw) != expected:
        raise FileFormatError(f"depth size mismatch: expected {expected} bytes, got {len(raw)}",
                              path=path, byte_offset=min(len(raw), expected))
    return np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float64)


def write_depth_png(path, depth):
    """16-bit PNG in millimeters."""
    from PIL import Image

    mm = _round_half_up(np.asarray(depth, dtype=np.float64) * 1000.0)
    if mm.max(initial=0) > 65535:
        raise ValueError("depth exceeds 16-bit millimeter range")
    img = Image.fromarray(mm.astype(np.uint16))  # uint16 maps to mode I;16
    img.save(path)


def read_depth_png(path):
    from PIL import Image

    try:
        img = Image.open(path)
        mm = np.asarray(img, dtype=np.float64)
    except Exception as e:
        raise FileFormatError(f"bad depth png: {e}", path=path)
    return mm / 1000.0


def write_depth(path, depth, fmt: str = "raw"):
    if fmt == "raw":
        write_depth_raw(path, depth)
    elif fmt == "png16":
        write_depth_png(path, depth)
    else:
        raise ValueError(f"unknown depth format '{fmt}'")


def read_depth(path):
    if str(path).endswith(".png"):
        return read_depth_png(path)
    return read_depth_raw(path)


def write_cameras(path, views: list[CameraView], depth_paths: dict[str, str]):
    """Camera collection JSON; depth maps referenced by path relative to the JSON file."""
    records = []
    for view in views:
        records.append({
            "view_id": view.view_id,
            "fx": view.fx, "fy": view.fy, "cx": view.cx, "cy": view.cy,
            "width": view.width, "height": view.height,
            "world_to_camera": [float(x) for x in view.world_to_camera.reshape(-1)],
            "depth": depth_paths[view.view_id],
        })
    with open(path, "w") as f:
        json.dump({"views": records}, f, sort_keys=True, indent=2)
        f.write("\n")


def read_cameras(path, load_depth: bool = True) -> list[CameraView]:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise FileFormatError(f"bad cameras file: {e.msg}", path=path, byte_offset=e.pos)
    if not isinstance(doc, dict) or "views" not in doc:
        raise FileFormatError("cameras file lacks a 'views' list", path=path, byte_offset=0)
    base = os.path.dirname(os.path.abspath(path))
    views = []
    for rec in doc["views"]:
        try:
            view = CameraView(
                view_id=str(rec["view_id"]),
                fx=float(rec["fx"]), fy=float(rec["fy"]),
                cx=float(rec["cx"]), cy=float(rec["cy"]),
                width=int(rec["width"]), height=int(rec["height"]),
                world_to_camera=np.asarray(rec["world_to_camera"], dtype=np.float64),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FileFormatError(f"bad camera record: {e}", path=path)
        if load_depth and rec.get("depth"):
            view.depth = read_depth(os.path.join(base, rec["depth"]))
        view.validate()
        views.append(view)
    return views
