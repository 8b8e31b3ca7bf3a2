"""Point-cloud container, normal estimation, k-NN adjacency, and synthetic scenes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np


@dataclass
class PointCloud:
    """3D positions (meters) with optional unit normals and an undirected edge list.

    Edges are stored as (i, j) index pairs with i < j, deduplicated and
    lexicographically sorted.
    """

    positions: np.ndarray
    normals: np.ndarray | None = None
    edges: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must have shape (N, 3), got {self.positions.shape}")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.positions.shape:
                raise ValueError("normals must have the same shape as positions")
        if self.edges is not None:
            self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)

    def __len__(self):
        return len(self.positions)

    def validate(self):
        """Check container invariants, raising ValueError on the first violation."""
        if self.normals is not None and len(self.normals):
            err = np.abs(np.linalg.norm(self.normals, axis=1) - 1.0)
            if float(err.max()) > 1e-6:
                raise ValueError(f"normals are not unit length (max deviation {err.max():.3g})")
        if self.edges is not None and len(self.edges):
            e = self.edges
            if e.min() < 0 or e.max() >= len(self):
                raise ValueError("edge index out of range")
            if not bool((e[:, 0] < e[:, 1]).all()):
                raise ValueError("edges must satisfy i < j (no self-loops)")
            if len(np.unique(e, axis=0)) != len(e):
                raise ValueError("duplicate edges")
        return self


@dataclass(frozen=True)
class PlaneSpec:
    """Rectangular planar patch sampled uniformly at `density` points per square meter."""

    center: tuple[float, float, float]
    normal: tuple[float, float, float]
    size: tuple[float, float]
    density: float


@dataclass(frozen=True)
class BoxSpec:
    """Axis-aligned box; all six faces are sampled, each with its own label."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    density: float


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Desk-scale synthetic scene: a list of primitives plus position noise."""

    primitives: tuple[Union[PlaneSpec, BoxSpec], ...]
    noise_sigma: float = 0.0
    seed: int = 0


def _knn_indices(positions, k):
    """Indices of the k nearest neighbors per point, self excluded.

    Ties in distance are broken by smaller index (stable sort over squared
    distances). Brute force in row chunks so output is exact and
    insertion-order independent.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    if not 1 <= k < n:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    out = np.empty((n, k), dtype=np.int64)
    rows_per_chunk = max(1, int(2e6) // max(n, 1))
    for start in range(0, n, rows_per_chunk):
        stop = min(start + rows_per_chunk, n)
        diff = positions[start:stop, None, :] - positions[None, :, :]
        d2 = np.einsum("rnc,rnc->rn", diff, diff)
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")
        out[start:stop] = order[:, :k]
    return out


def estimate_normals(cloud: PointCloud, k: int, viewpoint=(0.0, 0.0, 0.0)):
    """Estimate per-point unit normals by local covariance analysis.

    The normal at each point is the smallest-eigenvalue eigenvector of the
    covariance of its k nearest neighbors, flipped toward `viewpoint`.
    Rank-deficient neighborhoods (fewer than two independent directions)
    get a sentinel +z normal instead of aborting.

    Returns:
        (cloud_with_normals, degenerate_indices) where the second element
        lists points whose neighborhood covariance had rank < 2.
    """
    if k < 3:
        raise ValueError(f"k must be >= 3, got {k}")
    if len(cloud) < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, got {len(cloud)}")
    positions = cloud.positions
    viewpoint = np.asarray(viewpoint, dtype=np.float64)

    neighbors = positions[_knn_indices(positions, k)]  # (n, k, 3)
    centered = neighbors - neighbors.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending eigenvalues
    normals = eigvecs[:, :, 0].copy()

    # rank < 2: middle eigenvalue vanishes relative to the largest
    degenerate = eigvals[:, 1] <= 1e-9 * eigvals[:, 2] + 1e-30
    normals[degenerate] = (0.0, 0.0, 1.0)

    toward = viewpoint[None, :] - positions
    dots = np.einsum("nc,nc->n", normals, toward)
    normals[dots < 0] *= -1.0
    # dot exactly zero leaves the eigenvector sign undefined; canonicalize
    ambiguous = ~degenerate & (dots == 0.0)
    if ambiguous.any():
        sub = normals[ambiguous]
        lead = sub[np.arange(len(sub)), np.argmax(np.abs(sub), axis=1)]
        sub[lead < 0] *= -1.0
        normals[ambiguous] = sub

    result = PointCloud(positions.copy(), normals, None if cloud.edges is None else cloud.edges.copy())
    return result, np.flatnonzero(degenerate).tolist()


def build_knn_graph(cloud: PointCloud, k: int) -> PointCloud:
    """Attach a symmetric k-NN edge list (deduplicated, sorted, i < j) to the cloud."""
    neighbors = _knn_indices(cloud.positions, k)
    n = len(cloud)
    src = np.repeat(np.arange(n, dtype=np.int64), k)
    dst = neighbors.reshape(-1)
    edges = np.stack([np.minimum(src, dst), np.maximum(src, dst)], axis=1)
    return PointCloud(cloud.positions, cloud.normals, np.unique(edges, axis=0))


def _plane_basis(normal):
    """Deterministic orthonormal in-plane basis (u, v) for a unit normal."""
    n = np.asarray(normal, dtype=np.float64)
    norm = np.linalg.norm(n)
    if norm == 0:
        raise ValueError("plane normal must be nonzero")
    n = n / norm
    helper = np.zeros(3)
    helper[int(np.argmin(np.abs(n)))] = 1.0
    u = np.cross(n, helper)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    return n, u, v


def _sample_rect(rng, center, u_axis, v_axis, extent_u, extent_v, density):
    area = extent_u * extent_v
    count = max(1, int(round(area * density)))
    uu = rng.uniform(-extent_u / 2.0, extent_u / 2.0, size=count)
    vv = rng.uniform(-extent_v / 2.0, extent_v / 2.0, size=count)
    return center[None, :] + uu[:, None] * u_axis[None, :] + vv[:, None] * v_axis[None, :]


def generate_scene(spec: SyntheticSceneSpec):
    """Sample a synthetic scene; deterministic for a fixed spec and seed.

    Returns:
        (PointCloud with analytic face normals, per-point face label array).
        Labels enumerate generating faces: one per plane, six per box.
    """
    if not spec.primitives:
        raise ValueError("scene spec has no primitives")
    if spec.noise_sigma < 0:
        raise ValueError("noise sigma must be >= 0")
    rng = np.random.default_rng(spec.seed)

    chunks, normal_chunks, label_chunks = [], [], []
    label = 0
    for prim in spec.primitives:
        if prim.density <= 0:
            raise ValueError("primitive density must be > 0")
        if isinstance(prim, PlaneSpec):
            if min(prim.size) <= 0:
                raise ValueError("plane extents must be > 0")
            n, u, v = _plane_basis(prim.normal)
            pts = _sample_rect(rng, np.asarray(prim.center, dtype=np.float64), u, v,
                               prim.size[0], prim.size[1], prim.density)
            chunks.append(pts)
            normal_chunks.append(np.tile(n, (len(pts), 1)))
            label_chunks.append(np.full(len(pts), label, dtype=np.int64))
            label += 1
        elif isinstance(prim, BoxSpec):
            if min(prim.size) <= 0:
                raise ValueError("box extents must be > 0")
            center = np.asarray(prim.center, dtype=np.float64)
            size = np.asarray(prim.size, dtype=np.float64)
            for axis in range(3):
                for sign in (-1.0, 1.0):
                    n = np.zeros(3)
                    n[axis] = sign
                    face_center = center + n * size[axis] / 2.0
                    others = [a for a in range(3) if a != axis]
                    u = np.zeros(3)
                    u[others[0]] = 1.0
                    v = np.zeros(3)
                    v[others[1]] = 1.0
                    pts = _sample_rect(rng, face_center, u, v,
                                       size[others[0]], size[others[1]], prim.density)
                    chunks.append(pts)
                    normal_chunks.append(np.tile(n, (len(pts), 1)))
                    label_chunks.append(np.full(len(pts), label, dtype=np.int64))
                    label += 1
        else:
            raise TypeError(f"unknown primitive type {type(prim).__name__}")

    positions = np.concatenate(chunks, axis=0)
    normals = np.concatenate(normal_chunks, axis=0)
    labels = np.concatenate(label_chunks, axis=0)
    if spec.noise_sigma > 0:
        positions = positions + rng.normal(0.0, spec.noise_sigma, size=positions.shape)
    return PointCloud(positions, normals), labels
