"""Geometric consistency sets for RGB-D scenes.

Over-segmentation of 3D scene geometry into geometric consistency sets, their
projection into posed 2D views, and set-level contrastive losses with analytic
gradients, plus a desk-scale two-stage trainer and representation metrics.
"""

from .contrast import (Aggregator, FeatureMap, LossOutput, aggregate, normalize,
                       normalize_backward, pixel_infonce, pixel_point_infonce,
                       set_infonce)
from .errors import FileFormatError, GeosetError, TrainerError
from .geometry import (BoxSpec, PlaneSpec, PointCloud, SyntheticSceneSpec,
                       build_knn_graph, estimate_normals, generate_scene)
from .metrics import (coding_rate, cross_set_cosine, intra_set_cosine, pca_embed,
                      per_image_coding_rate, scale_by_mean_length)
from .projection import (CameraView, MatchIndex, ViewPair, ViewProjection,
                         build_match_index, compute_overlap, depth_validate,
                         look_at, mine_pairs, project_geo_sets, project_point,
                         render_depth)
from .segmentation import GeoSetPartition, SegmentationParams, edge_weight, segment
from .trainer import (EmbeddingTable, TrainConfig, TrainingData, build_training_data,
                      init_embeddings, poly_lr, run_two_stage, sgd_step)

__version__ = "0.1.0"

__all__ = [
    "Aggregator", "BoxSpec", "CameraView", "EmbeddingTable", "FeatureMap",
    "FileFormatError", "GeoSetPartition", "GeosetError", "LossOutput", "MatchIndex",
    "PlaneSpec", "PointCloud", "SegmentationParams", "SyntheticSceneSpec",
    "TrainConfig", "TrainerError", "TrainingData", "ViewPair", "ViewProjection",
    "aggregate", "build_knn_graph", "build_match_index", "build_training_data",
    "coding_rate", "compute_overlap", "cross_set_cosine", "depth_validate",
    "edge_weight", "estimate_normals", "generate_scene", "init_embeddings",
    "intra_set_cosine", "look_at", "mine_pairs", "normalize", "normalize_backward",
    "pca_embed", "per_image_coding_rate", "pixel_infonce", "pixel_point_infonce",
    "poly_lr", "project_geo_sets", "project_point", "render_depth", "run_two_stage",
    "scale_by_mean_length", "segment", "set_infonce", "sgd_step",
]
