"""Representation-quality metrics: coding rate, set-cosine probes, PCA export."""

from __future__ import annotations

import logging

import numpy as np

from .contrast import FeatureMap

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.5
UNLABELED = -1


def coding_rate(F, epsilon: float = DEFAULT_EPSILON) -> float:
    """R(F, eps) = 1/2 log det(I + d/(m eps^2) F F^T) for a d x m feature matrix.

    Evaluated on whichever Gram side is smaller (identical by Sylvester's
    determinant identity), via Cholesky for symmetric stability.  Natural log.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2:
        raise ValueError("F must be a 2-D d x m matrix")
    if not np.isfinite(F).all():
        raise ValueError("F contains non-finite entries")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    d, m = F.shape
    if d < 1 or m < 1:
        raise ValueError("F must be non-empty")
    alpha = d / (m * epsilon * epsilon)
    gram = F @ F.T if d <= m else F.T @ F
    M = np.eye(len(gram)) + alpha * gram
    L = np.linalg.cholesky(M)
    return float(np.sum(np.log(np.diagonal(L))))


def scale_by_mean_length(F):
    """Divide every column by the mean column L2 norm (no-op on all-zero input)."""
    F = np.asarray(F, dtype=np.float64)
    mean_norm = float(np.linalg.norm(F, axis=0).mean())
    if mean_norm < 1e-12:
        logger.warning("mean feature length below 1e-12; features left unscaled")
        return F
    return F / mean_norm


def per_image_coding_rate(fmap: FeatureMap, labels, epsilon: float = DEFAULT_EPSILON) -> float:
    """Mean per-category coding rate of one image's pixel features.

    Features are first scaled by the image's mean feature length; pixels carrying
    the unlabeled sentinel are ignored; groups are weighted equally.
    """
    labels = np.asarray(labels)
    if labels.shape != fmap.data.shape[:2]:
        raise ValueError("labels must align with the feature map")
    mask = labels != UNLABELED
    if not mask.any():
        raise ValueError("no labeled pixels")
    feats = fmap.data[mask]            # (m, C)
    group_ids = labels[mask]
    F = scale_by_mean_length(feats.T)  # d x m
    rates = [coding_rate(F[:, group_ids == g], epsilon) for g in np.unique(group_ids)]
    return float(np.mean(rates))


def intra_set_cosine(fmap: FeatureMap, projection) -> float:
    """Mean over sets of the mean pairwise cosine among the set's pixel features.

    Sets with fewer than two pixels are skipped; expects normalized features.
    """
    values = []
    for set_id in sorted(projection.set_pixels):
        uv = np.asarray(projection.set_pixels[set_id], dtype=np.int64)
        if len(uv) < 2:
            continue
        feats = fmap.data[uv[:, 1], uv[:, 0]]
        gram = feats @ feats.T
        n = len(feats)
        values.append((gram.sum() - np.trace(gram)) / (n * (n - 1)))
    if not values:
        raise ValueError("no set with at least two pixels")
    return float(np.mean(values))


def cross_set_cosine(fmap: FeatureMap, projection) -> float:
    """Mean over set pairs of the mean cosine between their pixel features.

    Equals the mean over unordered set pairs of the dot product of the two sets'
    mean unit features.  Requires at least two sets.
    """
    means = []
    for set_id in sorted(projection.set_pixels):
        uv = np.asarray(projection.set_pixels[set_id], dtype=np.int64)
        means.append(fmap.data[uv[:, 1], uv[:, 0]].mean(axis=0))
    if len(means) < 2:
        raise ValueError("need at least two sets")
    means = np.stack(means)
    gram = means @ means.T
    s = len(means)
    return float((gram.sum() - np.trace(gram)) / (s * (s - 1)))


def projection_label_map(projection, height: int, width: int):
    """Per-pixel set-id map for one view, UNLABELED where no set projects."""
    labels = np.full((height, width), UNLABELED, dtype=np.int64)
    for set_id in sorted(projection.set_pixels):
        for u, v in projection.set_pixels[set_id]:
            labels[v, u] = set_id
    return labels


def pca_embed(fmap: FeatureMap):
    """Project pixel features onto their top-3 principal components, in [0, 1].

    Channels beyond the covariance rank fall back to a constant 0.5.
    """
    h, w, c = fmap.data.shape
    if c < 3:
        raise ValueError("pca_embed needs at least 3 channels")
    flat = fmap.data.reshape(-1, c)
    centered = flat - flat.mean(axis=0)
    cov = centered.T @ centered / max(len(flat), 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    out = np.full((h * w, 3), 0.5)
    for channel in range(3):
        val = eigvals[-1 - channel]
        if val <= 1e-12 * max(eigvals[-1], 1e-12) or val <= 0:
            continue
        comp = eigvecs[:, -1 - channel]
        # deterministic sign: largest-magnitude entry positive
        if comp[np.argmax(np.abs(comp))] < 0:
            comp = -comp
        proj = centered @ comp
        lo, hi = proj.min(), proj.max()
        if hi - lo < 1e-12:
            continue
        out[:, channel] = (proj - lo) / (hi - lo)
    return out.reshape(h, w, 3)


def write_ppm(path, image):
    """Write an H x W x 3 map in [0, 1] as a binary PPM (P6)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("image must be H x W x 3")
    data = np.clip(np.floor(image * 255.0 + 0.5), 0, 255).astype(np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())
