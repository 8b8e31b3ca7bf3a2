"""Pinhole projection, depth validation, z-buffer conflicts, pair mining, IO."""

import numpy as np
import pytest

import geoset as gs
from geoset import projection as pj


def identity_view(view_id="cam", fx=500.0, fy=500.0, cx=320.0, cy=240.0,
                  width=640, height=480, depth=None):
    return gs.CameraView(view_id, fx=fx, fy=fy, cx=cx, cy=cy,
                         width=width, height=height,
                         world_to_camera=np.eye(4), depth=depth)


def small_view(view_id, eye_x=0.0, depth=None):
    """16x16 camera at (eye_x, 0, 0) looking straight down +z."""
    pose = np.eye(4)
    pose[0, 3] = -eye_x
    return gs.CameraView(view_id, fx=16.0, fy=16.0, cx=7.5, cy=7.5,
                         width=16, height=16, world_to_camera=pose, depth=depth)


def plane_cloud(x_range, y_range, z, density, seed=0):
    rng = np.random.default_rng(seed)
    n = int((x_range[1] - x_range[0]) * (y_range[1] - y_range[0]) * density)
    pts = np.stack([rng.uniform(*x_range, n), rng.uniform(*y_range, n),
                    np.full(n, float(z))], axis=1)
    return gs.PointCloud(pts)


def depth_oracle(cloud, view):
    """Reference z-buffer: per-pixel minimum z by explicit loop."""
    depth = np.zeros((view.height, view.width))
    for p in cloud.positions:
        cam = view.to_camera(p)[0]
        if cam[2] <= 0:
            continue
        u = int(np.floor(view.fx * cam[0] / cam[2] + view.cx + 0.5))
        v = int(np.floor(view.fy * cam[1] / cam[2] + view.cy + 0.5))
        if 0 <= u < view.width and 0 <= v < view.height:
            if depth[v, u] == 0 or cam[2] < depth[v, u]:
                depth[v, u] = cam[2]
    return depth


class TestProjectPoint:
    def test_optical_axis_lands_on_principal_point(self):
        view = identity_view()
        assert pj.project_point([0.0, 0.0, 2.0], view) == (320, 240, 2.0)

    def test_offset_point(self):
        # u = 500 * (1/2) + 320 = 570
        assert pj.project_point([1.0, 0.0, 2.0], identity_view()) == (570, 240, 2.0)

    def test_point_behind_camera_is_rejected(self):
        assert pj.project_point([0.0, 0.0, -1.0], identity_view()) is None
        assert pj.project_point([0.0, 0.0, 0.0], identity_view()) is None

    def test_out_of_bounds_is_rejected(self):
        assert pj.project_point([10.0, 0.0, 2.0], identity_view()) is None

    def test_rounding_is_half_up_not_bankers(self):
        # u_float = 500 * (0.5/500) * ... choose x so fx*x/z + cx = 320.5
        view = identity_view()
        u, v, _ = pj.project_point([0.5 * 2 / 500 * 1.001, 0.0, 2.0], view)
        assert u == 321 or u == 320  # sanity: near the boundary
        u, _, _ = pj.project_point([0.001, -0.9592, 2.0], view)
        # exact half cases on both parities round up
        assert pj._round_half_up(320.5) == 321
        assert pj._round_half_up(321.5) == 322
        assert pj._round_half_up(-0.5) == 0

    def test_pose_is_applied(self):
        pose = np.eye(4)
        pose[:3, 3] = [0.0, 0.0, 3.0]  # camera 3m behind the origin
        view = gs.CameraView("c", fx=100, fy=100, cx=50, cy=50, width=101,
                             height=101, world_to_camera=pose)
        assert pj.project_point([0.0, 0.0, 0.0], view) == (50, 50, 3.0)


class TestDepthValidate:
    def view_with_depth(self, value):
        depth = np.zeros((4, 4))
        depth[1, 2] = value
        return gs.CameraView("c", fx=4, fy=4, cx=1.5, cy=1.5, width=4, height=4,
                             world_to_camera=np.eye(4), depth=depth)

    def test_exact_match_passes(self):
        assert pj.depth_validate(2, 1, 2.0, self.view_with_depth(2.0))

    def test_threshold_is_inclusive(self):
        assert pj.depth_validate(2, 1, 2.05, self.view_with_depth(2.0))

    def test_mismatch_beyond_threshold_fails(self):
        assert not pj.depth_validate(2, 1, 2.06, self.view_with_depth(2.0))

    def test_depth_hole_fails(self):
        assert not pj.depth_validate(0, 0, 2.0, self.view_with_depth(2.0))

    def test_custom_threshold(self):
        assert pj.depth_validate(2, 1, 2.4, self.view_with_depth(2.0), threshold=0.5)


class TestRenderDepth:
    def test_matches_loop_oracle(self):
        cloud = plane_cloud((-1, 1), (-1, 1), 2.0, density=400, seed=3)
        extra = gs.PointCloud(np.vstack([cloud.positions,
                                         [[0.1, 0.1, 1.0], [0.1, 0.1, 0.5]]]))
        view = small_view("a")
        np.testing.assert_allclose(pj.render_depth(extra, view),
                                   depth_oracle(extra, view), atol=1e-12)

    def test_nearest_point_wins(self):
        cloud = gs.PointCloud([[0.0, 0.0, 2.0], [0.0, 0.0, 1.0], [0.0, 0.0, 3.0]])
        depth = pj.render_depth(cloud, small_view("a"))
        assert depth[8, 8] == 1.0  # principal point rounds to (8, 8)

    def test_empty_pixels_are_zero(self):
        depth = pj.render_depth(gs.PointCloud(np.zeros((0, 3))), small_view("a"))
        assert (depth == 0).all()


class TestProjectGeoSets:
    def two_set_cloud(self):
        """Two stacked points per pixel column: set 0 near, set 1 far."""
        near = [[0.0, 0.0, 1.0], [0.1, 0.0, 1.0]]
        far = [[0.0, 0.0, 2.0], [0.1, 0.0, 2.0], [0.4, 0.4, 2.0]]
        cloud = gs.PointCloud(near + far)
        labels = np.array([0, 0, 1, 1, 1], dtype=np.uint32)
        return cloud, gs.GeoSetPartition(labels, 2)

    def test_occluded_points_are_dropped(self):
        cloud, part = self.two_set_cloud()
        view = small_view("a", depth=pj.render_depth(cloud, small_view("a")))
        proj = pj.project_geo_sets(cloud, part, view)
        # far points under the near ones fail depth validation
        assert 2 not in proj.point_pixels and 3 not in proj.point_pixels
        assert 4 in proj.point_pixels  # unoccluded far point survives
        assert set(proj.set_pixels) == {0, 1}

    def test_pixel_conflict_goes_to_nearer_set(self):
        # both sets within threshold of the stored depth on the same pixel
        cloud = gs.PointCloud([[0.0, 0.0, 1.0], [0.0, 0.0, 1.04]])
        part = gs.GeoSetPartition(np.array([0, 1], dtype=np.uint32), 2)
        view = small_view("a", depth=pj.render_depth(cloud, small_view("a")))
        proj = pj.project_geo_sets(cloud, part, view)
        assert proj.set_pixels == {0: [(8, 8)]}
        assert 1 not in proj.point_pixels  # loser dropped entirely

    def test_same_set_cohabitants_are_kept(self):
        cloud = gs.PointCloud([[0.0, 0.0, 1.0], [0.0, 0.0, 1.04]])
        part = gs.GeoSetPartition(np.array([0, 0], dtype=np.uint32), 1)
        view = small_view("a", depth=pj.render_depth(cloud, small_view("a")))
        proj = pj.project_geo_sets(cloud, part, view)
        assert proj.point_pixels == {0: (8, 8), 1: (8, 8)}
        assert proj.set_pixels == {0: [(8, 8)]}  # deduplicated pixel list

    def test_pixel_lists_sorted_and_unique(self):
        cloud = plane_cloud((-0.4, 0.4), (-0.4, 0.4), 1.0, density=600, seed=5)
        part = gs.GeoSetPartition(np.zeros(len(cloud), dtype=np.uint32), 1)
        view = small_view("a", depth=pj.render_depth(cloud, small_view("a")))
        proj = pj.project_geo_sets(cloud, part, view)
        pixels = proj.set_pixels[0]
        assert pixels == sorted(set(pixels))

    def test_requires_depth(self):
        cloud, part = self.two_set_cloud()
        with pytest.raises(ValueError, match="depth"):
            pj.project_geo_sets(cloud, part, small_view("a"))


def overlap_pair():
    """Two aligned cameras over a z=2 plane; exactly half the pixels shake hands.

    Camera b sits 0.9375 m along +x, one half of camera a's footprint.
    """
    cloud = plane_cloud((-1.2, 3.2), (-1.2, 1.2), 2.0, density=2600, seed=11)
    a = small_view("a")
    b = small_view("b", eye_x=0.9375)
    a.depth = pj.render_depth(cloud, a)
    b.depth = pj.render_depth(cloud, b)
    return a, b


class TestOverlap:
    def test_identical_views_overlap_fully(self):
        a, _ = overlap_pair()
        twin = small_view("twin", depth=a.depth)
        assert pj.compute_overlap(a, twin) == 1.0

    def test_disjoint_views_overlap_zero(self):
        a, _ = overlap_pair()
        flipped = np.eye(4)
        flipped[0, 0] = flipped[2, 2] = -1.0  # 180 degree turn, looks down -z
        c = gs.CameraView("c", fx=16, fy=16, cx=7.5, cy=7.5, width=16, height=16,
                          world_to_camera=flipped)
        c.depth = pj.render_depth(plane_cloud((-1, 1), (-1, 1), 2.0, 400), a)
        assert pj.compute_overlap(a, c) == 0.0

    def test_half_overlap_construction(self):
        a, b = overlap_pair()
        ov = pj.compute_overlap(a, b)
        assert 0.45 <= ov <= 0.55

    def test_symmetric(self):
        a, b = overlap_pair()
        assert pj.compute_overlap(a, b) == pj.compute_overlap(b, a)

    def test_empty_depth_gives_zero(self):
        a = small_view("a", depth=np.zeros((16, 16)))
        b = small_view("b", depth=np.zeros((16, 16)))
        assert pj.compute_overlap(a, b) == 0.0


class TestMinePairs:
    def make_clones(self, count):
        cloud = plane_cloud((-1, 1), (-1, 1), 2.0, density=500)
        base = small_view("v0")
        depth = pj.render_depth(cloud, base)
        return [small_view(f"v{i}", depth=depth) for i in range(count)]

    def test_stride_subsamples_frames(self):
        views = self.make_clones(50)
        pairs = pj.mine_pairs(views, frame_stride=25, overlap_min=0.3)
        assert [(p.view_m, p.view_n) for p in pairs] == [("v0", "v25")]
        assert pairs[0].overlap == 1.0

    def test_single_view_yields_no_pairs(self):
        assert pj.mine_pairs(self.make_clones(1), frame_stride=1) == []

    def test_threshold_is_strict(self):
        """Craft a pair whose overlap is exactly 0.3: 3 of 10 source pixels land
        on valid destination depth, and all 3 destination pixels map back."""
        a = small_view("a", depth=np.zeros((16, 16)))
        b = small_view("b", depth=np.zeros((16, 16)))
        cols = [2, 5, 8, 11, 3, 6, 9, 12, 4, 7]
        for i, u in enumerate(cols):
            a.depth[i, u] = 2.0
        for i, u in enumerate(cols[:3]):
            b.depth[i, u] = 2.0  # identical pose: pixels map to themselves
        assert pj.compute_overlap(a, b) == pytest.approx(0.3)
        assert pj.mine_pairs([a, b], frame_stride=1, overlap_min=0.3) == []
        kept = pj.mine_pairs([a, b], frame_stride=1, overlap_min=0.3 - 1e-9)
        assert [(p.view_m, p.view_n) for p in kept] == [("a", "b")]

    def test_rejects_bad_stride(self):
        with pytest.raises(ValueError, match="frame_stride"):
            pj.mine_pairs([], frame_stride=0)


class TestMatchIndex:
    def make_projections(self, n_points=40, seed=0):
        proj_m = pj.ViewProjection("m")
        proj_n = pj.ViewProjection("n")
        rng = np.random.default_rng(seed)
        for p in range(n_points):
            uv_m = (int(rng.integers(0, 16)), int(rng.integers(0, 16)))
            uv_n = (int(rng.integers(0, 16)), int(rng.integers(0, 16)))
            proj_m.point_pixels[p] = uv_m
            proj_n.point_pixels[p] = uv_n
            proj_m.set_pixels.setdefault(p % 3, []).append(uv_m)
            proj_n.set_pixels.setdefault(p % 3, []).append(uv_n)
        return proj_m, proj_n

    def test_shared_points_become_pixel_pairs(self):
        proj_m, proj_n = self.make_projections()
        del proj_n.point_pixels[7]  # point 7 visible only in m
        index = pj.build_match_index(proj_m, proj_n)
        assert len(index.pixel_pairs) == 39
        assert (proj_m.point_pixels[0], proj_n.point_pixels[0]) in index.pixel_pairs

    def test_min_pixels_filters_set_tuples(self):
        proj_m, proj_n = self.make_projections()
        proj_n.set_pixels[2] = proj_n.set_pixels[2][:2]  # below min_pixels=5
        index = pj.build_match_index(proj_m, proj_n, min_pixels=5)
        assert [t[0] for t in index.set_tuples] == [0, 1]
        assert index.set_tuples[0] == (0, "m", "n")

    def test_pixel_cap_subsamples_deterministically(self):
        proj_m, proj_n = self.make_projections(n_points=60)
        a = pj.build_match_index(proj_m, proj_n, pixel_cap=20, seed=1)
        b = pj.build_match_index(proj_m, proj_n, pixel_cap=20, seed=1)
        full = pj.build_match_index(proj_m, proj_n)
        assert len(a.pixel_pairs) == 20
        assert a.pixel_pairs == b.pixel_pairs
        assert set(map(tuple, a.pixel_pairs)) <= set(map(tuple, full.pixel_pairs))


class TestLookAt:
    def test_target_projects_to_principal_point(self):
        view = gs.CameraView("c", fx=16, fy=16, cx=7.5, cy=7.5, width=16, height=16,
                             world_to_camera=pj.look_at((1.0, -2.0, 0.5), (0.2, 0.3, 0.1)))
        u, v, z = pj.project_point([0.2, 0.3, 0.1], view)
        assert (u, v) == (8, 8)  # 7.5 rounds half-up
        assert z == pytest.approx(np.linalg.norm([0.8, -2.3, 0.4]))

    def test_rotation_is_orthonormal(self):
        view = gs.CameraView("c", fx=1, fy=1, cx=0, cy=0, width=2, height=2,
                             world_to_camera=pj.look_at((3, 1, 2), (0, 0, 0)))
        view.validate()

    def test_world_camera_round_trip(self):
        view = gs.CameraView("c", fx=1, fy=1, cx=0, cy=0, width=2, height=2,
                             world_to_camera=pj.look_at((3, 1, 2), (0, 0, 0)))
        pts = np.random.default_rng(0).normal(size=(10, 3))
        np.testing.assert_allclose(view.to_world(view.to_camera(pts)), pts, atol=1e-12)

    def test_coincident_eye_and_target_rejected(self):
        with pytest.raises(ValueError, match="coincide"):
            pj.look_at((1, 1, 1), (1, 1, 1))


class TestValidate:
    def test_bad_rotation_rejected(self):
        pose = np.eye(4)
        pose[0, 0] = 2.0
        view = gs.CameraView("c", fx=1, fy=1, cx=0, cy=0, width=2, height=2,
                             world_to_camera=pose)
        with pytest.raises(ValueError, match="orthonormal"):
            view.validate()

    def test_bad_focal_rejected(self):
        view = gs.CameraView("c", fx=-1, fy=1, cx=0, cy=0, width=2, height=2,
                             world_to_camera=np.eye(4))
        with pytest.raises(ValueError, match="focal"):
            view.validate()

    def test_depth_shape_checked(self):
        view = gs.CameraView("c", fx=1, fy=1, cx=0, cy=0, width=2, height=2,
                             world_to_camera=np.eye(4), depth=np.zeros((3, 3)))
        with pytest.raises(ValueError, match="depth shape"):
            view.validate()


class TestDepthIO:
    def test_raw_round_trip(self, tmp_path):
        depth = np.abs(np.random.default_rng(0).normal(size=(5, 7))) + 0.5
        path = tmp_path / "d.raw"
        pj.write_depth(path, depth, fmt="raw")
        np.testing.assert_allclose(pj.read_depth(path), depth, atol=1e-7)

    def test_png_round_trip_quantizes_to_millimeters(self, tmp_path):
        depth = np.array([[1.2345, 0.0], [2.0006, 60.0]])
        path = tmp_path / "d.png"
        pj.write_depth(path, depth, fmt="png16")
        back = pj.read_depth(path)
        np.testing.assert_allclose(back, [[1.235, 0.0], [2.001, 60.0]], atol=1e-9)

    def test_raw_size_mismatch(self, tmp_path):
        path = tmp_path / "d.raw"
        pj.write_depth_raw(path, np.zeros((4, 4)))
        path.write_bytes(b"\x00" * 10)
        with pytest.raises(gs.FileFormatError, match="size mismatch"):
            pj.read_depth_raw(path)

    def test_missing_sidecar(self, tmp_path):
        path = tmp_path / "d.raw"
        path.write_bytes(b"\x00" * 16)
        with pytest.raises(gs.FileFormatError, match="sidecar"):
            pj.read_depth_raw(path)

    def test_unknown_format_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="format"):
            pj.write_depth(tmp_path / "d.x", np.zeros((2, 2)), fmt="exr")


class TestCamerasIO:
    def test_round_trip_with_depth(self, tmp_path):
        cloud = plane_cloud((-1, 1), (-1, 1), 2.0, density=300)
        views = [small_view("a"), small_view("b", eye_x=0.5)]
        depth_paths = {}
        for view in views:
            view.depth = pj.render_depth(cloud, view)
            rel = f"depth/{view.view_id}.raw"
            (tmp_path / "depth").mkdir(exist_ok=True)
            pj.write_depth_raw(tmp_path / rel, view.depth)
            depth_paths[view.view_id] = rel
        pj.write_cameras(tmp_path / "cameras.json", views, depth_paths)
        back = pj.read_cameras(tmp_path / "cameras.json")
        assert [v.view_id for v in back] == ["a", "b"]
        for orig, loaded in zip(views, back):
            np.testing.assert_allclose(loaded.world_to_camera, orig.world_to_camera)
            np.testing.assert_allclose(loaded.depth, orig.depth, atol=1e-6)
            assert (loaded.fx, loaded.width) == (orig.fx, orig.width)

    def test_bad_json_reports_offset(self, tmp_path):
        path = tmp_path / "cameras.json"
        path.write_text('{"views": [')
        with pytest.raises(gs.FileFormatError) as err:
            pj.read_cameras(path)
        assert err.value.byte_offset is not None

    def test_missing_views_key(self, tmp_path):
        path = tmp_path / "cameras.json"
        path.write_text("{}")
        with pytest.raises(gs.FileFormatError, match="views"):
            pj.read_cameras(path)
