"""Shared fixtures: hand-built segmentation fixtures, the toy multi-view scene,
and a terminal-summary hook that prints one line per acceptance criterion."""

import time

import numpy as np
import pytest

import geoset as gs
from geoset.projection import look_at, render_depth
from geoset.trainer import TrainConfig, build_training_data, run_two_stage

ACCEPTANCE_RESULTS = {}


def record_acceptance(number, name, passed, detail=""):
    ACCEPTANCE_RESULTS[number] = (name, passed, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        name, passed, detail = ACCEPTANCE_RESULTS[number]
        status = "PASS" if passed else "FAIL"
        suffix = f" ({detail})" if detail else ""
        terminalreporter.write_line(f"  criterion {number} [{status}] {name}{suffix}")


@pytest.fixture
def two_plane_cloud():
    """Twenty points in two planar clusters with orthogonal normals.

    Each cluster is chained by zero-weight edges (identical normals); one
    bridging edge of weight 1 connects them.  Ground truth: first ten points
    are set 0, last ten are set 1.
    """
    positions = np.zeros((20, 3))
    positions[:10, 0] = np.arange(10) * 0.1           # plane A along x, normal +z
    positions[10:, 2] = np.arange(10) * 0.1           # plane B along z, normal +x
    positions[10:, 0] = 1.0
    normals = np.zeros((20, 3))
    normals[:10, 2] = 1.0
    normals[10:, 0] = 1.0
    edges = [(i, i + 1) for i in range(9)] + [(10 + i, 11 + i) for i in range(9)]
    edges.append((9, 10))                             # the bridge, weight 1
    return gs.PointCloud(positions, normals, np.asarray(edges))


def make_toy_scene(density=18, n_views=40, width=16, seed=0, noise_sigma=0.0):
    """Three orthogonal planar patches ringed by small pinhole views."""
    spec = gs.SyntheticSceneSpec(primitives=[
        gs.PlaneSpec(center=(0, 0, 0), normal=(0, 0, 1), size=(1.2, 1.2), density=density),
        gs.PlaneSpec(center=(0.9, 0, 0.6), normal=(1, 0, 0), size=(1.2, 1.2), density=density),
        gs.PlaneSpec(center=(0, 0.9, 0.6), normal=(0, 1, 0), size=(1.2, 1.2), density=density),
    ], noise_sigma=noise_sigma, seed=seed)
    cloud, gt_labels = gs.generate_scene(spec)
    views = []
    for i in range(n_views):
        angle = 2 * np.pi * i / n_views
        eye = (0.3 + 2.2 * np.cos(angle), 0.3 + 2.2 * np.sin(angle), 1.8)
        view = gs.CameraView(f"v{i:03d}", fx=float(width), fy=float(width),
                             cx=(width - 1) / 2, cy=(width - 1) / 2,
                             width=width, height=width,
                             world_to_camera=look_at(eye, (0.3, 0.3, 0.3)))
        view.depth = render_depth(cloud, view)
        views.append(view)
    return cloud, gt_labels, views


@pytest.fixture(scope="session")
def toy_training_data():
    cloud, _, views = make_toy_scene()
    graph = gs.build_knn_graph(cloud, k=8)
    partition = gs.segment(graph, gs.SegmentationParams(k_threshold=0.05, min_size=10))
    pairs = gs.mine_pairs(views, frame_stride=1, overlap_min=0.3)
    data = build_training_data(cloud, partition, views, pairs, seed=0)
    return data, partition


@pytest.fixture(scope="session")
def toy_run(toy_training_data):
    """One default-config two-stage run over the toy scene, with wall time."""
    data, _ = toy_training_data
    config = TrainConfig()
    start = time.monotonic()
    table, log = run_two_stage(data, config)
    elapsed = time.monotonic() - start
    return {"data": data, "config": config, "table": table, "log": log,
            "elapsed": elapsed}
