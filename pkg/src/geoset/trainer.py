"""Desk-scale two-stage contrastive training over per-pixel embedding tables.

Stage 1 optimizes pixel-level losses (pixel-to-pixel, plus pixel-to-point when
point features are supplied); stage 2 optimizes the set-level loss alone.  The
learnable state is a raw per-pixel embedding table per view; gradients chain
analytically through L2 normalization into the raw tables.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .contrast import (Aggregator, FeatureMap, normalize, normalize_backward,
                       pixel_infonce, pixel_infonce_pooled, pixel_point_infonce,
                       pixel_point_infonce_pooled, set_infonce)
from .errors import TrainerError
from .metrics import intra_set_cosine
from .projection import build_match_index, project_geo_sets

DEFAULT_CHANNELS = 16


@dataclass(frozen=True)
class TrainConfig:
    """Two-stage schedule knobs.

    tau defaults to 0.45 here (not the 0.07 loss-function default): desk-scale
    set denominators hold only a handful of terms, and with a small temperature
    the softmax saturates once the positive leads by a few tau, stalling the
    intra-set collapse long before the features cluster.
    """

    base_lr: float = 0.1
    batch_size: int = 4
    epochs_stage1: int = 5
    epochs_stage2: int = 2
    poly_power: float = 0.9
    tau: float = 0.45
    seed: int = 0
    channels: int = DEFAULT_CHANNELS
    embed_init_scale: float = 0.01
    momentum: float = 0.0
    pool_negatives: bool = False
    agg_anchor: str = "mean"
    agg_positive: str = "mean"
    agg_seed: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValueError("epochs must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.channels < 1:
            raise ValueError("channels must be at least 1")

    def aggregators(self):
        return (Aggregator(self.agg_anchor, self.agg_seed),
                Aggregator(self.agg_positive, self.agg_seed))


@dataclass
class EmbeddingTable:
    """Raw (pre-normalization) learnable per-pixel features, one grid per view."""

    raw: dict[str, np.ndarray]

    def normalized(self, view_id) -> FeatureMap:
        return normalize(FeatureMap(self.raw[view_id]))

    def normalized_all(self) -> dict[str, FeatureMap]:
        return {view: self.normalized(view) for view in sorted(self.raw)}


@dataclass
class PairData:
    view_m: str
    view_n: str
    pixel_pairs: list
    set_tuples: list


@dataclass
class TrainingData:
    """Everything the trainer consumes: projections, mined matches, shapes."""

    view_shapes: dict[str, tuple[int, int]]
    projections: dict
    pairs: list[PairData]
    point_features: np.ndarray | None = None
    point_matches: dict[str, list] = field(default_factory=dict)


def init_embeddings(view_shapes, config: TrainConfig) -> EmbeddingTable:
    """Seeded Gaussian init, independent of dict insertion order."""
    rng = np.random.default_rng(config.seed)
    raw = {}
    for view in sorted(view_shapes):
        h, w = view_shapes[view]
        raw[view] = rng.normal(0.0, config.embed_init_scale, size=(h, w, config.channels))
    return EmbeddingTable(raw)


def build_training_data(cloud, partition, views, mined_pairs, point_features=None,
                        min_pixels: int = 5, pixel_cap: int = 4096, seed: int = 0,
                        threshold: float = 0.05, bidirectional: bool = True) -> TrainingData:
    """Project the partition into every view and assemble per-pair match indices.

    Mined pairs are unordered; by default both orientations of each pair become
    training pairs (anchor and positive roles swapped), which symmetrizes the
    losses.  Pairs that end up with no pixel matches or no set tuples are
    dropped.
    """
    by_id = {v.view_id: v for v in views}
    needed = sorted({p.view_m for p in mined_pairs} | {p.view_n for p in mined_pairs})
    projections = {}
    shapes = {}
    for view_id in needed:
        view = by_id[view_id]
        projections[view_id] = project_geo_sets(cloud, partition, view, threshold)
        shapes[view_id] = (view.height, view.width)

    oriented = [(p.view_m, p.view_n) for p in mined_pairs]
    if bidirectional:
        oriented += [(p.view_n, p.view_m) for p in mined_pairs]
    pairs = []
    for view_m, view_n in oriented:
        index = build_match_index(projections[view_m], projections[view_n],
                                  min_pixels=min_pixels, pixel_cap=pixel_cap, seed=seed)
        if index.pixel_pairs and index.set_tuples:
            pairs.append(PairData(view_m, view_n, index.pixel_pairs, index.set_tuples))

    data = TrainingData(shapes, projections, pairs, point_features=point_features)
    if point_features is not None:
        for view_id in needed:
            matches = [(uv, point) for point, uv
                       in sorted(projections[view_id].point_pixels.items())]
            if len(matches) > pixel_cap:
                rng = np.random.default_rng([seed, zlib.crc32(view_id.encode("utf-8"))])
                chosen = np.sort(rng.choice(len(matches), size=pixel_cap, replace=False))
                matches = [matches[i] for i in chosen]
            data.point_matches[view_id] = matches
    return data


def poly_lr(base: float, iteration: int, max_iter: int, power: float) -> float:
    """Polynomial decay base * (1 - iter/max_iter)^power."""
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    if not 0 <= iteration <= max_iter:
        raise ValueError("iteration out of range")
    return base * (1.0 - iteration / max_iter) ** power


def sgd_step(table: EmbeddingTable, grads, lr: float,
             momentum: float = 0.0, velocity=None):
    """In-place SGD update; optional classical momentum behind the flag."""
    for view, grad in grads.items():
        if not np.isfinite(grad).all():
            raise TrainerError(f"non-finite gradient for view {view}")
        if momentum > 0.0:
            vel = velocity.setdefault(view, np.zeros_like(grad))
            vel *= momentum
            vel += grad
            table.raw[view] -= lr * vel
        else:
            table.raw[view] -= lr * grad
    return table


def _mean_intra_cosine(table: EmbeddingTable, data: TrainingData):
    values = []
    for view in sorted(data.view_shapes):
        proj = data.projections[view]
        if any(len(p) >= 2 for p in proj.set_pixels.values()):
            values.append(intra_set_cosine(table.normalized(view), proj))
    return float(np.mean(values)) if values else None


def run_two_stage(data: TrainingData, config: TrainConfig):
    """Train stage 1 (pixel losses) then stage 2 (set loss); returns (table, log).

    The log holds one record per step and loss kind:
      {"stage", "epoch", "step", "loss_kind", "loss", "lr"}
    plus per-epoch probe records {"stage", "epoch", "metric", "value"}; the
    record with stage 0 captures the metric at initialization.  PolyLR restarts
    at the stage boundary and optimizer state is fresh per stage.
    """
    if not data.pairs:
        raise TrainerError("empty dataset: no trainable pairs")
    table = init_embeddings(data.view_shapes, config)
    log = []
    rng = np.random.default_rng(config.seed)
    agg_anchor, agg_positive = config.aggregators()

    value = _mean_intra_cosine(table, data)
    if value is not None:
        log.append({"stage": 0, "epoch": 0, "metric": "intra_set_cosine", "value": value})

    def run_stage(stage, epochs, step_fn):
        steps_per_epoch = math.ceil(len(data.pairs) / config.batch_size)
        max_iter = epochs * steps_per_epoch
        iteration = 0
        for epoch in range(epochs):
            order = rng.permutation(len(data.pairs))
            velocity = {}
            for start in range(0, len(order), config.batch_size):
                batch = [data.pairs[i] for i in order[start:start + config.batch_size]]
                lr = poly_lr(config.base_lr, iteration, max_iter, config.poly_power)
                grads = step_fn(batch, lr, stage, epoch, iteration)
                sgd_step(table, grads, lr, config.momentum, velocity)
                iteration += 1
            value = _mean_intra_cosine(table, data)
            if value is not None:
                log.append({"stage": stage, "epoch": epoch,
                            "metric": "intra_set_cosine", "value": value})

    def stage1_step(batch, lr, stage, epoch, iteration):
        views = sorted({p.view_m for p in batch} | {p.view_n for p in batch})
        fmaps = {v: table.normalized(v) for v in views}
        norm_grads = {v: np.zeros_like(table.raw[v]) for v in views}

        if config.pool_negatives:
            entries = [(fmaps[p.view_m], fmaps[p.view_n], p.pixel_pairs) for p in batch]
            pixel_loss, entry_grads = pixel_infonce_pooled(entries, config.tau)
            for pair, grad in zip(batch, entry_grads):
                norm_grads[pair.view_m] += grad["anchor"]
                norm_grads[pair.view_n] += grad["positive"]
        else:
            losses = []
            for pair in batch:
                out = pixel_infonce(fmaps[pair.view_m], fmaps[pair.view_n],
                                    pair.pixel_pairs, config.tau)
                losses.append(out.loss)
                norm_grads[pair.view_m] += out.grads["anchor"] / len(batch)
                norm_grads[pair.view_n] += out.grads["positive"] / len(batch)
            pixel_loss = float(np.mean(losses))
        log.append({"stage": stage, "epoch": epoch, "step": iteration,
                    "loss_kind": "pixel", "loss": pixel_loss, "lr": lr})

        if data.point_features is not None:
            point_views = [v for v in views if data.point_matches.get(v)]
            if config.pool_negatives:
                entries = [(fmaps[v], data.point_matches[v]) for v in point_views]
                point_loss, pixel_grads, _ = pixel_point_infonce_pooled(
                    entries, data.point_features, config.tau)
                for v, grad in zip(point_views, pixel_grads):
                    norm_grads[v] += grad
            else:
                losses = []
                for v in point_views:
                    out = pixel_point_infonce(fmaps[v], data.point_features,
                                              data.point_matches[v], config.tau)
                    losses.append(out.loss)
                    norm_grads[v] += out.grads["pixels"] / len(point_views)
                point_loss = float(np.mean(losses))
            log.append({"stage": stage, "epoch": epoch, "step": iteration,
                        "loss_kind": "pixel_point", "loss": point_loss, "lr": lr})

        return {v: normalize_backward(table.raw[v], g) for v, g in norm_grads.items()}

    def stage2_step(batch, lr, stage, epoch, iteration):
        views = sorted({p.view_m for p in batch} | {p.view_n for p in batch})
        fmaps = {v: table.normalized(v) for v in views}
        norm_grads = {v: np.zeros_like(table.raw[v]) for v in views}

        if config.pool_negatives:
            tuples = [t for pair in batch for t in pair.set_tuples]
            out = set_infonce(fmaps, data.projections, tuples, config.tau,
                              agg_anchor, agg_positive)
            set_loss = out.loss
            for v, grad in out.grads.items():
                norm_grads[v] += grad
        else:
            losses = []
            for pair in batch:
                out = set_infonce(fmaps, data.projections, pair.set_tuples,
                                  config.tau, agg_anchor, agg_positive)
                losses.append(out.loss)
                for v, grad in out.grads.items():
                    norm_grads[v] += grad / len(batch)
            set_loss = float(np.mean(losses))
        log.append({"stage": stage, "epoch": epoch, "step": iteration,
                    "loss_kind": "set", "loss": set_loss, "lr": lr})
        return {v: normalize_backward(table.raw[v], g) for v, g in norm_grads.items()}

    run_stage(1, config.epochs_stage1, stage1_step)
    run_stage(2, config.epochs_stage2, stage2_step)
    return table, log
