"""Contrastive losses over projected geometric consistency sets.

Pixel-level InfoNCE, set-level InfoNCE with pluggable aggregation, and the
pixel-to-point variant, each returning the loss together with exact analytic
gradients with respect to the participating (normalized) features.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

DEFAULT_TAU = 0.07
_NORM_EPS = 1e-12


@dataclass
class FeatureMap:
    """Row-major H x W grid of C-vectors."""

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("feature map must be (H, W, C)")

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class Aggregator:
    """Set-feature aggregation: the mean, or one deterministically seeded pixel."""

    kind: str = "mean"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("mean", "arbitrary_point"):
            raise ValueError(f"unknown aggregator kind '{self.kind}'")


@dataclass
class LossOutput:
    loss: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def normalize(fmap: FeatureMap) -> FeatureMap:
    """L2-normalize each pixel vector; zero vectors pass through the epsilon guard."""
    norms = np.linalg.norm(fmap.data, axis=-1, keepdims=True)
    return FeatureMap(fmap.data / np.maximum(norms, _NORM_EPS), normalized=True)


def normalize_backward(raw, grad_normalized):
    """Chain a gradient w.r.t. normalized features back to the raw features.

    For f = v / max(||v||, eps): above the guard the Jacobian is (I - f f^T)/||v||,
    below it the map is linear with slope 1/eps.
    """
    raw = np.asarray(raw, dtype=np.float64)
    g = np.asarray(grad_normalized, dtype=np.float64)
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    scale = np.maximum(norms, _NORM_EPS)
    f = raw / scale
    radial = np.sum(g * f, axis=-1, keepdims=True)
    return (g - np.where(norms > _NORM_EPS, radial, 0.0) * f) / scale


def _require_normalized(fmap: FeatureMap, name):
    if not fmap.normalized:
        raise ValueError(f"{name} must be normalized")


def _view_key(view_id) -> int:
    if isinstance(view_id, str):
        return zlib.crc32(view_id.encode("utf-8"))
    return int(view_id)


def _arbitrary_index(agg: Aggregator, set_id, view_id, count) -> int:
    seq = np.random.SeedSequence([agg.seed, int(set_id), _view_key(view_id)])
    return int(np.random.default_rng(seq).integers(count))


def aggregate(fmap: FeatureMap, pixels, agg: Aggregator, set_id=0, view_id=""):
    """Aggregate the features at the given (u, v) pixels into one C-vector.

    Mean follows the literal formula (no re-normalization); arbitrary_point picks
    one pixel deterministically from (seed, set id, view id), independent of the
    list order.
    """
    if not len(pixels):
        raise ValueError("cannot aggregate an empty pixel list")
    pixels = sorted(pixels)
    if agg.kind == "mean":
        uv = np.asarray(pixels, dtype=np.int64)
        return fmap.data[uv[:, 1], uv[:, 0]].mean(axis=0)
    u, v = pixels[_arbitrary_index(agg, set_id, view_id, len(pixels))]
    return fmap.data[v, u].copy()


def _softmax_ce(anchors, positives, negatives, tau):
    """Shared InfoNCE core.

    Row t scores anchor t against every negative, with the diagonal replaced by
    the positive; loss is the mean cross-entropy against the diagonal.  Returns
    (loss, dA, dB, dN); dN is None when negatives is the positives array itself
    (its contribution is folded into dB).
    """
    A = np.asarray(anchors, dtype=np.float64)
    B = np.asarray(positives, dtype=np.float64)
    N = B if negatives is None else np.asarray(negatives, dtype=np.float64)
    fused = negatives is None
    T = len(A)
    logits = (A @ N.T) / tau
    diag_idx = np.arange(T)
    pos_logits = np.einsum("tc,tc->t", A, B) / tau
    logits[diag_idx, diag_idx] = pos_logits

    row_max = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - row_max)
    denom = exp.sum(axis=1, keepdims=True)
    loss = float(np.mean(np.log(denom[:, 0]) + row_max[:, 0] - pos_logits))

    G = exp / denom
    G[diag_idx, diag_idx] -= 1.0
    G /= T
    g_diag = G[diag_idx, diag_idx].copy()
    G[diag_idx, diag_idx] = 0.0

    dA = (G @ N + g_diag[:, None] * B) / tau
    dB = g_diag[:, None] * A / tau
    dN = G.T @ A / tau
    if fused:
        return loss, dA, dB + dN, None
    return loss, dA, dB, dN


def _scatter(grad_map, pixels_uv, grads):
    uv = np.asarray(pixels_uv, dtype=np.int64)
    np.add.at(grad_map, (uv[:, 1], uv[:, 0]), grads)


def pixel_infonce(f_m: FeatureMap, f_n: FeatureMap, matches, tau: float = DEFAULT_TAU) -> LossOutput:
    """InfoNCE over pixel-to-pixel matches between two views.

    For each pair the positive is its matched pixel in the second view and the
    negatives are the second-view pixels of every pair in the match list.
    Gradients are w.r.t. the normalized maps, keyed "anchor" and "positive".
    """
    _require_normalized(f_m, "f_m")
    _require_normalized(f_n, "f_n")
    if not len(matches):
        raise ValueError("no matches")
    uv_m = [m[0] for m in matches]
    uv_n = [m[1] for m in matches]
    a_idx = np.asarray(uv_m, dtype=np.int64)
    b_idx = np.asarray(uv_n, dtype=np.int64)
    A = f_m.data[a_idx[:, 1], a_idx[:, 0]]
    B = f_n.data[b_idx[:, 1], b_idx[:, 0]]

    loss, dA, dB, _ = _softmax_ce(A, B, None, tau)
    grad_m = np.zeros_like(f_m.data)
    grad_n = np.zeros_like(f_n.data)
    _scatter(grad_m, uv_m, dA)
    _scatter(grad_n, uv_n, dB)
    return LossOutput(loss, {"anchor": grad_m, "positive": grad_n})


def pixel_infonce_pooled(entries, tau: float = DEFAULT_TAU):
    """Pixel InfoNCE with negatives pooled across a batch of view pairs.

    entries: list of (f_m, f_n, matches).  Returns (loss, per-entry grad dicts)
    where the loss is the mean over all pooled pairs.
    """
    if not entries:
        raise ValueError("no entries")
    A_parts, B_parts, slices = [], [], []
    start = 0
    for f_m, f_n, matches in entries:
        _require_normalized(f_m, "f_m")
        _require_normalized(f_n, "f_n")
        if not len(matches):
            raise ValueError("no matches")
        a_idx = np.asarray([m[0] for m in matches], dtype=np.int64)
        b_idx = np.asarray([m[1] for m in matches], dtype=np.int64)
        A_parts.append(f_m.data[a_idx[:, 1], a_idx[:, 0]])
        B_parts.append(f_n.data[b_idx[:, 1], b_idx[:, 0]])
        slices.append(slice(start, start + len(matches)))
        start += len(matches)

    loss, dA, dB, _ = _softmax_ce(np.concatenate(A_parts), np.concatenate(B_parts), None, tau)
    grads = []
    for (f_m, f_n, matches), sl in zip(entries, slices):
        grad_m = np.zeros_like(f_m.data)
        grad_n = np.zeros_like(f_n.data)
        _scatter(grad_m, [m[0] for m in matches], dA[sl])
        _scatter(grad_n, [m[1] for m in matches], dB[sl])
        grads.append({"anchor": grad_m, "positive": grad_n})
    return loss, grads


def _aggregate_with_weights(fmap: FeatureMap, pixels, agg: Aggregator, set_id, view_id):
    """Aggregate and remember how to route a gradient back to the pixels."""
    pixels = sorted(pixels)
    uv = np.asarray(pixels, dtype=np.int64)
    if agg.kind == "mean":
        vec = fmap.data[uv[:, 1], uv[:, 0]].mean(axis=0)
        weights = np.full(len(pixels), 1.0 / len(pixels))
    else:
        sel = _arbitrary_index(agg, set_id, view_id, len(pixels))
        vec = fmap.data[uv[sel, 1], uv[sel, 0]].copy()
        weights = np.zeros(len(pixels))
        weights[sel] = 1.0
    return vec, uv, weights


def set_infonce(features_by_view, projections, m_s, tau: float = DEFAULT_TAU,
                agg_anchor: Aggregator = Aggregator("mean"),
                agg_positive: Aggregator = Aggregator("mean")) -> LossOutput:
    """Set-level InfoNCE over matched projections of geometric consistency sets.

    For tuple (i, m, n) the anchor is agg_anchor over the set's pixels in view m
    and the positive is agg_positive over its pixels in view n.  Negatives are
    the anchor-side aggregator applied to the positive-side projections of every
    tuple in m_s; the positive term itself is included in the denominator.
    Gradients accumulate per view over every pixel touched by any aggregate.
    """
    if not len(m_s):
        raise ValueError("no set tuples")
    for view_id, fmap in features_by_view.items():
        _require_normalized(fmap, f"view {view_id}")

    symmetric = agg_anchor == agg_positive
    anchors, positives, negatives = [], [], []
    anchor_routes, positive_routes, negative_routes = [], [], []
    for set_id, m, n in m_s:
        for view, role in ((m, "anchor"), (n, "positive")):
            if view not in projections or set_id not in projections[view].set_pixels:
                raise ValueError(f"tuple ({set_id}, {m}, {n}): set {set_id} missing in view {view}")
        pix_m = projections[m].set_pixels[set_id]
        pix_n = projections[n].set_pixels[set_id]
        vec, uv, wts = _aggregate_with_weights(features_by_view[m], pix_m, agg_anchor, set_id, m)
        anchors.append(vec)
        anchor_routes.append((m, uv, wts))
        vec, uv, wts = _aggregate_with_weights(features_by_view[n], pix_n, agg_positive, set_id, n)
        positives.append(vec)
        positive_routes.append((n, uv, wts))
        if not symmetric:
            vec, uv, wts = _aggregate_with_weights(features_by_view[n], pix_n, agg_anchor, set_id, n)
            negatives.append(vec)
            negative_routes.append((n, uv, wts))

    loss, dA, dB, dN = _softmax_ce(
        np.stack(anchors), np.stack(positives),
        None if symmetric else np.stack(negatives), tau)

    grads = {view: np.zeros_like(fmap.data) for view, fmap in features_by_view.items()}
    for routes, dX in ((anchor_routes, dA), (positive_routes, dB), (negative_routes, dN)):
        if dX is None:
            continue
        for (view, uv, wts), g in zip(routes, dX):
            np.add.at(grads[view], (uv[:, 1], uv[:, 0]), wts[:, None] * g[None, :])
    return LossOutput(loss, grads)


def pixel_point_infonce(f_2d: FeatureMap, point_features, matches,
                        tau: float = DEFAULT_TAU) -> LossOutput:
    """InfoNCE between pixel features and matched 3D point features.

    matches: list of ((u, v), point index).  Negatives are the point-side
    features of every match.  Gradients: "pixels" (map) and "points" (table).
    """
    _require_normalized(f_2d, "f_2d")
    if not len(matches):
        raise ValueError("no matches")
    point_features = np.asarray(point_features, dtype=np.float64)
    uv = [m[0] for m in matches]
    pts = np.asarray([m[1] for m in matches], dtype=np.int64)
    a_idx = np.asarray(uv, dtype=np.int64)
    A = f_2d.data[a_idx[:, 1], a_idx[:, 0]]
    B = point_features[pts]

    loss, dA, dB, _ = _softmax_ce(A, B, None, tau)
    grad_map = np.zeros_like(f_2d.data)
    grad_pts = np.zeros_like(point_features)
    _scatter(grad_map, uv, dA)
    np.add.at(grad_pts, pts, dB)
    return LossOutput(loss, {"pixels": grad_map, "points": grad_pts})


def pixel_point_infonce_pooled(entries, point_features, tau: float = DEFAULT_TAU):
    """Pixel-to-point InfoNCE pooled across views sharing one point table.

    entries: list of (f_2d, matches).  Returns (loss, per-entry pixel grads,
    point table grad).
    """
    if not entries:
        raise ValueError("no entries")
    point_features = np.asarray(point_features, dtype=np.float64)
    A_parts, pts_parts, slices = [], [], []
    start = 0
    for f_2d, matches in entries:
        _require_normalized(f_2d, "f_2d")
        if not len(matches):
            raise ValueError("no matches")
        a_idx = np.asarray([m[0] for m in matches], dtype=np.int64)
        A_parts.append(f_2d.data[a_idx[:, 1], a_idx[:, 0]])
        pts_parts.append(np.asarray([m[1] for m in matches], dtype=np.int64))
        slices.append(slice(start, start + len(matches)))
        start += len(matches)
    pts = np.concatenate(pts_parts)
    loss, dA, dB, _ = _softmax_ce(np.concatenate(A_parts), point_features[pts], None, tau)

    pixel_grads = []
    for (f_2d, matches), sl in zip(entries, slices):
        grad_map = np.zeros_like(f_2d.data)
        _scatter(grad_map, [m[0] for m in matches], dA[sl])
        pixel_grads.append(grad_map)
    grad_pts = np.zeros_like(point_features)
    np.add.at(grad_pts, pts, dB)
    return loss, pixel_grads, grad_pts
