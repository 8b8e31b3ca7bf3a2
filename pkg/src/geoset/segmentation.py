"""Normal-based graph-cut over-segmentation producing geometric consistency sets.

Felzenszwalb-Huttenlocher union-find over a point-cloud k-NN graph with edge
weights derived from normal disagreement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud


@dataclass(frozen=True)
class SegmentationParams:
    """Clustering knobs: FH threshold k, minimum set size, convex-edge relaxation."""

    k_threshold: float = 0.05
    min_size: int = 20
    convexity_relaxation: bool = False

    def __post_init__(self):
        if self.k_threshold <= 0:
            raise ValueError("k_threshold must be positive")
        if self.min_size < 1:
            raise ValueError("min_size must be at least 1")


@dataclass
class GeoSetPartition:
    """Dense per-point labeling 0..set_count-1."""

    labels: np.ndarray
    set_count: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint32)
        if self.labels.ndim != 1:
            raise ValueError("labels must be a 1-D array")
        if self.labels.size and int(self.labels.max()) != self.set_count - 1:
            raise ValueError("labels must be dense 0..set_count-1")

    def sets(self) -> list[np.ndarray]:
        """Point indices per set, ordered by label."""
        if self.set_count == 0:
            return []
        order = np.argsort(self.labels, kind="stable")
        boundaries = np.searchsorted(self.labels[order], np.arange(1, self.set_count))
        return np.split(order, boundaries)


def edge_weight(n_i, n_j, p_i, p_j, convexity_relaxation: bool) -> float:
    """Normal-disagreement weight 1 - n_i.n_j, squared on locally convex edges."""
    w = 1.0 - float(np.dot(n_i, n_j))
    if convexity_relaxation and float(np.dot(n_i, np.asarray(p_j) - np.asarray(p_i))) < 0:
        return w * w
    return w


class _UnionFind:
    def __init__(self, n):
        self.parent = np.arange(n, dtype=np.int64)
        self.size = np.ones(n, dtype=np.int64)
        self.internal = np.zeros(n, dtype=np.float64)  # Int(C): largest merged weight

    def find(self, i):
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, a, b, w):
        # a, b must already be roots
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = max(self.internal[a], self.internal[b], w)
        return a


def _edge_weights(cloud: PointCloud, params: SegmentationParams):
    i, j = cloud.edges[:, 0], cloud.edges[:, 1]
    w = 1.0 - np.einsum("ec,ec->e", cloud.normals[i], cloud.normals[j])
    if params.convexity_relaxation:
        convex = np.einsum("ec,ec->e",
                           cloud.normals[i], cloud.positions[j] - cloud.positions[i]) < 0
        w = np.where(convex, w * w, w)
    return w


def segment(cloud: PointCloud, params: SegmentationParams) -> GeoSetPartition:
    """Felzenszwalb-Huttenlocher segmentation of the cloud's normal-weighted graph.

    Edges are processed in ascending (weight, i, j) order; two components merge
    when the edge weight is at most min(Int(C) + k/|C|) over both sides.  Sets
    smaller than min_size are then folded into the neighbor reached by their
    cheapest crossing edge.  Labels are dense, ordered by first point index.
    """
    if cloud.normals is None:
        raise ValueError("segment requires normals")
    if cloud.edges is None:
        raise ValueError("segment requires edges")
    n = len(cloud)
    uf = _UnionFind(n)

    if len(cloud.edges):
        w = _edge_weights(cloud, params)
        order = np.lexsort((cloud.edges[:, 1], cloud.edges[:, 0], w))
        edges = cloud.edges[order]
        weights = w[order]
        k = params.k_threshold

        for (i, j), wij in zip(edges, weights):
            a, b = uf.find(i), uf.find(j)
            if a == b:
                continue
            if wij <= uf.internal[a] + k / uf.size[a] and wij <= uf.internal[b] + k / uf.size[b]:
                uf.union(a, b, wij)

        _merge_small_sets(uf, edges, weights, params.min_size)

    return _relabel(uf, n)


def _merge_small_sets(uf: _UnionFind, edges, weights, min_size):
    """Fold each set below min_size into the neighbor on its cheapest crossing edge.

    Isolated small components (no crossing edges) are left alone.  Passes repeat
    until no merge applies; small sets are handled in first-point order.
    """
    n = len(uf.parent)
    while True:
        roots = np.fromiter((uf.find(i) for i in range(n)), dtype=np.int64, count=n)
        first_point = {}
        for idx, r in enumerate(roots):
            first_point.setdefault(int(r), idx)
        small = sorted((r for r in first_point if uf.size[r] < min_size),
                       key=lambda r: first_point[r])
        if not small:
            return
        # cheapest crossing edge per root, one sweep over the sorted edge list
        best = {}
        for (i, j), wij in zip(edges, weights):
            a, b = uf.find(i), uf.find(j)
            if a == b:
                continue
            for r in (a, b):
                if r not in best:
                    best[int(r)] = (int(i), int(j))
        merged = False
        for r in small:
            r = uf.find(r)
            if uf.size[r] >= min_size or r not in best:
                continue
            i, j = best[r]
            a, b = uf.find(i), uf.find(j)
            if a == b:
                continue
            uf.union(a, b, 0.0)
            merged = True
        if not merged:
            return


def _relabel(uf: _UnionFind, n) -> GeoSetPartition:
    labels = np.empty(n, dtype=np.uint32)
    mapping = {}
    for i in range(n):
        r = uf.find(i)
        if r not in mapping:
            mapping[r] = len(mapping)
        labels[i] = mapping[r]
    return GeoSetPartition(labels, len(mapping) if n else 0)
