"""End-to-end orchestration: detect, crop, encode, classify, annotate.

A :class:`Pipeline` ties a trained detector, a trained patch embedder and
a gallery index together. It refuses to run when the index was built from
different embedder weights (stale gallery) unless explicitly overridden.
"""

from __future__ import annotations

import colorsys
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data import Scene
from .embedder import PatchEmbedder
from .evaluation import SceneDetections
from .gallery import GalleryIndex, StaleGalleryWarning, classify, load_index, topk
from .localizer import ProductLocalizer


class GalleryFingerprintError(RuntimeError):
    """The gallery index does not match the embedder weights in use."""


@dataclass
class Detection:
    """One recognized product instance."""

    box: tuple[float, float, float, float]
    score: float
    label: str | None = None
    distance: float | None = None
    topk: list[tuple[str, float]] | None = None

    def to_dict(self) -> dict:
        out = {"box": [float(v) for v in self.box], "score": float(self.score)}
        if self.label is not None:
            out["label"] = self.label
            out["distance"] = float(self.distance)
            out["topk"] = [[lbl, float(d)] for lbl, d in self.topk]
        return out


@dataclass
class PipelineConfig:
    detector_weights: str = "detector.weights"
    embedder_weights: str = "embedder.weights"
    gallery_index: str = "gallery.index"
    max_dets: int = 100
    score_threshold: float = 0.05
    crop_padding: float = 0.05
    topk: int = 5
    allow_stale_gallery: bool = False

    def __post_init__(self):
        if not 0.0 <= self.crop_padding <= 0.5:
            raise ValueError("crop_padding must lie in [0, 0.5]")
        if self.max_dets < 1 or self.topk < 1:
            raise ValueError("max_dets and topk must be >= 1")


def parse_config_file(path) -> PipelineConfig:
    """Read a flat ``key = value`` config file.

    Values are JSON literals where possible (numbers, booleans), plain
    strings otherwise; relative paths resolve against the config file's
    directory; ``#`` starts a comment.
    """
    path = Path(path)
    values: dict = {}
    known = set(PipelineConfig.__dataclass_fields__)
    path_keys = {"detector_weights", "embedder_weights", "gallery_index"}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in known:
                raise ValueError(f"{path}:{line_no}: unknown config key {key!r}")
            try:
                parsed = json.loads(value)
            except json.JSONDecodeError:
                parsed = value
            if key in path_keys:
                parsed = str((path.parent / str(parsed)).resolve())
            values[key] = parsed
    return PipelineConfig(**values)


def crop_patch(image: np.ndarray, box, padding: float = 0.05) -> np.ndarray:
    """Crop a box with proportional context padding, clamped to the image."""
    h, w = image.shape[:2]
    x1, y1, x2, y2 = (float(v) for v in box)
    px = padding * (x2 - x1)
    py = padding * (y2 - y1)
    ix1 = min(max(int(np.floor(x1 - px)), 0), w - 1)
    iy1 = min(max(int(np.floor(y1 - py)), 0), h - 1)
    ix2 = min(max(int(np.ceil(x2 + px)), ix1 + 1), w)
    iy2 = min(max(int(np.ceil(y2 + py)), iy1 + 1), h)
    return image[iy1:iy2, ix1:ix2]


class Pipeline:
    """detect -> crop -> encode -> classify, with fingerprint checking."""

    def __init__(
        self,
        localizer: ProductLocalizer,
        embedder: PatchEmbedder,
        index: GalleryIndex,
        config: PipelineConfig | None = None,
    ):
        self.config = config or PipelineConfig()
        self.localizer = localizer
        self.embedder = embedder
        self.index = index
        if not index.check_fingerprint(embedder.weights_fingerprint(), warn=False):
            if not self.config.allow_stale_gallery:
                raise GalleryFingerprintError(
                    "gallery index was built from different embedder weights "
                    "(pass allow_stale_gallery to override)"
                )
            warnings.warn("running with a stale gallery index", StaleGalleryWarning)

    @classmethod
    def from_config(cls, config: PipelineConfig) -> "Pipeline":
        for name in ("detector_weights", "embedder_weights", "gallery_index"):
            p = Path(getattr(config, name))
            if not p.exists():
                raise FileNotFoundError(f"{name} file not found: {p}")
        localizer = ProductLocalizer.load(
            config.detector_weights, score_threshold=config.score_threshold
        )
        embedder = PatchEmbedder.load(config.embedder_weights)
        index = load_index(config.gallery_index)
        return cls(localizer, embedder, index, config)

    def run(self, image: np.ndarray) -> list[Detection]:
        cfg = self.config
        boxes, scores = self.localizer.detect(image, max_dets=cfg.max_dets)
        if len(boxes) == 0:
            return []
        patches = [crop_patch(image, b, cfg.crop_padding) for b in boxes]
        embeddings = self.embedder.transform(patches)
        detections = []
        for box, score, emb in zip(boxes, scores, embeddings):
            label, distance = classify(emb, self.index)
            ranked = topk(emb, self.index, cfg.topk)
            detections.append(
                Detection(tuple(box.tolist()), float(score), label, distance, ranked)
            )
        return detections

    def run_scene(self, scene: Scene) -> SceneDetections:
        return detections_to_eval(scene.image_id, self.run(scene.image))


def detections_to_record(image_id: str, detections: list[Detection]) -> dict:
    return {"image": image_id, "boxes": [d.to_dict() for d in detections]}


def record_to_eval(record: dict) -> SceneDetections:
    """Detections-JSON record -> evaluation input."""
    boxes = np.asarray([d["box"] for d in record["boxes"]], dtype=np.float64).reshape(-1, 4)
    scores = np.asarray([d["score"] for d in record["boxes"]], dtype=np.float64)
    labels = [d["label"] for d in record["boxes"] if "label" in d]
    ranked = [[lbl for lbl, _ in d["topk"]] for d in record["boxes"] if "topk" in d]
    return SceneDetections(
        record["image"],
        boxes,
        scores,
        labels=labels if len(labels) == len(boxes) else None,
        topk_labels=ranked if len(ranked) == len(boxes) else None,
    )


def detections_to_eval(image_id: str, detections: list[Detection]) -> SceneDetections:
    return record_to_eval(detections_to_record(image_id, detections))


def label_colors(labels: list[str]) -> dict[str, tuple[int, int, int]]:
    """Stable, well-separated color per label (sorted order fixes hues)."""
    ordered = sorted(set(labels))
    colors = {}
    for i, label in enumerate(ordered):
        r, g, b = colorsys.hsv_to_rgb((i / max(len(ordered), 1)) % 1.0, 0.95, 0.95)
        colors[label] = (int(r * 255), int(g * 255), int(b * 255))
    return colors


def render_annotations(
    image: np.ndarray,
    detections: list[Detection],
    color_map: dict[str, tuple[int, int, int]] | None = None,
) -> np.ndarray:
    """Draw per-class colored boxes and labels; deterministic output."""
    if color_map is None:
        color_map = label_colors([d.label for d in detections if d.label is not None])
    pil = Image.fromarray(np.ascontiguousarray(image.astype(np.uint8)))
    draw = ImageDraw.Draw(pil)
    h, w = image.shape[:2]
    for det in detections:
        color = color_map.get(det.label, (255, 40, 40))
        x1, y1, x2, y2 = det.box
        draw.rectangle([x1, y1, min(x2, w - 1), min(y2, h - 1)], outline=color, width=2)
        if det.label is not None:
            draw.text((x1 + 2, max(y1 - 11, 0)), det.label, fill=color)
    return np.asarray(pil)
