"""Two-stage retail shelf product detection and recognition.

A feature-pyramid region localizer finds product instances in rack
images; a metric-learning patch embedder with max-activation descriptors
classifies each crop against a gallery built from one query image per
product class.
"""

from .embedder import AugmentParams, PatchEmbedder, augment, triplet_loss
from .evaluation import (
    EvalReport,
    SceneDetections,
    SceneGroundTruth,
    eval_center_f1,
    eval_coco,
    eval_map_pr_05,
    eval_topk_map,
)
from .gallery import GalleryClassifier, GalleryIndex, build_gallery, classify, load_index, save_index, topk
from .localizer import ProductLocalizer, TrainSchedule, schedule_lr
from .pipeline import Detection, Pipeline, PipelineConfig, parse_config_file, render_annotations
from .synthetic import SceneSpec, gen_synthetic_dataset

__version__ = "0.1.0"

__all__ = [
    "AugmentParams",
    "Detection",
    "EvalReport",
    "GalleryClassifier",
    "GalleryIndex",
    "PatchEmbedder",
    "Pipeline",
    "PipelineConfig",
    "ProductLocalizer",
    "SceneDetections",
    "SceneGroundTruth",
    "SceneSpec",
    "TrainSchedule",
    "augment",
    "build_gallery",
    "classify",
    "eval_center_f1",
    "eval_coco",
    "eval_map_pr_05",
    "eval_topk_map",
    "gen_synthetic_dataset",
    "load_index",
    "parse_config_file",
    "render_annotations",
    "save_index",
    "schedule_lr",
    "topk",
    "triplet_loss",
]
