"""Image and dataset file IO.

A dataset split is one directory of images plus an ``annotations.jsonl``
file; each line is ``{"image": <relative path>, "boxes": [[x1,y1,x2,y2],
...], "labels": [<str>, ...]}``. The detector ignores labels; evaluation
and the gallery use them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .geometry import check_boxes

ANNOTATIONS_NAME = "annotations.jsonl"


@dataclass
class Scene:
    image_id: str
    image: np.ndarray  # uint8 (H, W, 3)
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    labels: list[str] = field(default_factory=list)


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def save_image(path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image.astype(np.uint8))).save(path, format="PNG")


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) -> float32 (3, H, W) scaled to [0, 1]."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    arr = np.ascontiguousarray(image, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to (width, height), returning uint8."""
    pil = Image.fromarray(np.ascontiguousarray(image.astype(np.uint8)))
    return np.asarray(pil.resize(size, Image.BILINEAR))


def save_annotations(path, records: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_annotations(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: invalid JSON line: {exc}") from exc
    return records


def load_split(split_dir) -> list[Scene]:
    """Load every scene of one dataset split into memory."""
    split_dir = Path(split_dir)
    ann_path = split_dir / ANNOTATIONS_NAME
    if not ann_path.exists():
        raise FileNotFoundError(f"no {ANNOTATIONS_NAME} in {split_dir}")
    scenes = []
    for rec in load_annotations(ann_path):
        boxes = np.asarray(rec.get("boxes", []), dtype=np.float64).reshape(-1, 4)
        if len(boxes):
            boxes = check_boxes(boxes)
        scenes.append(
            Scene(
                image_id=rec["image"],
                image=load_image(split_dir / rec["image"]),
                boxes=boxes,
                labels=list(rec.get("labels", [])),
            )
        )
    return scenes


def load_query_db(query_dir) -> list[tuple[str, np.ndarray]]:
    """Load the query-image database: one (label, image) per product class."""
    query_dir = Path(query_dir)
    manifest = query_dir / "query.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no query.jsonl in {query_dir}")
    products = []
    for rec in load_annotations(manifest):
        products.append((rec["label"], load_image(query_dir / rec["image"])))
    return products
