"""Procedural shelf-scene generator with exact ground truth.

Scenes are rack images: a wooden-shelf background with a rows x cols grid
of cells, each either blank or holding one product glyph (a colored shape
with a small printed code). Glyphs are drawn per class from a fixed
palette; the last two classes form a near-duplicate pair (same shape,
same hue, slightly different shade and code) to exercise fine-grained
recognition. Ground-truth boxes are the exact extents of the pasted
glyph pixels.

Everything is driven by explicit seeds: the same spec always produces a
byte-identical dataset.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data import save_annotations, save_image

SHAPES = ("box", "can", "triangle", "diamond", "hexagon", "tall")
_GOLDEN = 0.618033988749895

BACKGROUND = np.array([182, 156, 118], dtype=np.float64)
SHELF_BOARD = np.array([121, 96, 66], dtype=np.float64)
QUERY_BACKGROUND = (203, 203, 203)


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of the synthetic rack world."""

    n_classes: int = 8
    rows: int = 3
    cols: int = 3
    cell_size: int = 48
    blank_prob: float = 0.25
    jitter: float = 0.08
    scale_range: tuple[float, float] = (0.7, 0.92)
    illumination: tuple[float, float] = (0.85, 1.15)
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two product classes")
        if not 0.0 <= self.blank_prob <= 1.0:
            raise ValueError("blank_prob must lie in [0, 1]")
        if self.rows < 1 or self.cols < 1 or self.cell_size < 24:
            raise ValueError("grid must be at least 1x1 with cell_size >= 24")
        if not 0.0 < self.scale_range[0] <= self.scale_range[1] <= 1.0:
            raise ValueError("scale_range must lie in (0, 1]")

    @property
    def labels(self) -> list[str]:
        return [f"p{i:02d}" for i in range(self.n_classes)]

    def canvas_size(self) -> tuple[int, int, int, int]:
        """(height, width, offset_y, offset_x); dims are multiples of 32."""
        h0 = self.rows * self.cell_size + 16
        w0 = self.cols * self.cell_size + 16
        h = int(math.ceil(h0 / 32) * 32)
        w = int(math.ceil(w0 / 32) * 32)
        return h, w, (h - self.rows * self.cell_size) // 2, (w - self.cols * self.cell_size) // 2


def class_style(class_id: int, n_classes: int) -> dict:
    """Deterministic shape/color/code for one class.

    The final two classes share shape and hue and differ only in shade
    and printed code.
    """
    near_dup = n_classes >= 4 and class_id >= n_classes - 2
    base = n_classes - 2 if near_dup else class_id
    hue = (base * _GOLDEN) % 1.0
    value = 0.85 if (not near_dup or class_id == base) else 0.68
    rgb = colorsys.hsv_to_rgb(hue, 0.8, value)
    return {
        "shape": SHAPES[base % len(SHAPES)],
        "fill": tuple(int(round(c * 255)) for c in rgb),
        "code": f"{class_id:02d}",
    }


def render_glyph(class_id: int, n_classes: int, size: int) -> np.ndarray:
    """RGBA glyph image of the given side length; alpha 0 off the body."""
    style = class_style(class_id, n_classes)
    img = Image.new("RGBA", (size, size), (0, 0, 0, 0))
    draw = ImageDraw.Draw(img)
    inset = max(1, round(size * 0.06))
    lo, hi = inset, size - 1 - inset
    mid = size // 2
    outline = tuple(c // 3 for c in style["fill"]) + (255,)
    fill = style["fill"] + (255,)
    width = max(1, size // 20)

    shape = style["shape"]
    if shape == "box":
        draw.rectangle([lo, lo, hi, hi], fill=fill, outline=outline, width=width)
    elif shape == "can":
        draw.ellipse([lo, lo, hi, hi], fill=fill, outline=outline, width=width)
    elif shape == "triangle":
        draw.polygon([(mid, lo), (hi, hi), (lo, hi)], fill=fill, outline=outline)
    elif shape == "diamond":
        draw.polygon([(mid, lo), (hi, mid), (mid, hi), (lo, mid)], fill=fill, outline=outline)
    elif shape == "hexagon":
        q = (hi - lo) // 4
        draw.polygon(
            [(lo + q, lo), (hi - q, lo), (hi, mid), (hi - q, hi), (lo + q, hi), (lo, mid)],
            fill=fill,
            outline=outline,
        )
    else:  # tall
        narrow = max(1, round(size * 0.18))
        draw.rectangle([lo + narrow, lo, hi - narrow, hi], fill=fill, outline=outline, width=width)

    code = style["code"]
    tb = draw.textbbox((0, 0), code)
    tw, th = tb[2] - tb[0], tb[3] - tb[1]
    draw.text((mid - tw / 2, mid - th / 2 + size * 0.08), code, fill=(15, 15, 15, 255))
    return np.asarray(img)


def render_query_image(class_id: int, n_classes: int, size: int = 64) -> np.ndarray:
    """Clean canonical reference photo of one product class."""
    canvas = np.full((size, size, 3), QUERY_BACKGROUND, dtype=np.uint8)
    g = round(size * 0.84)
    glyph = render_glyph(class_id, n_classes, g)
    off = (size - g) // 2
    mask = glyph[..., 3] > 0
    region = canvas[off : off + g, off : off + g]
    region[mask] = glyph[..., :3][mask]
    return canvas


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w, oy, ox = spec.canvas_size()
    img = np.tile(BACKGROUND, (h, w, 1))
    gradient = np.linspace(-9.0, 9.0, h)[:, None, None]
    img = img + gradient + rng.integers(-3, 4, size=(h, w, 3))
    for r in range(spec.rows):
        y = oy + (r + 1) * spec.cell_size
        img[max(y - 3, 0) : min(y + 2, h), :, :] = SHELF_BOARD + rng.integers(
            -2, 3, size=(1,)
        )
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render_scene(
    spec: SceneSpec, rng: np.random.Generator, return_masks: bool = False
):
    """One rack image with exact ground truth.

    Returns (image, boxes, labels) and, when return_masks is set, the
    per-item boolean paste masks on the full canvas.
    """
    h, w, oy, ox = spec.canvas_size()
    img = _background(spec, rng)
    boxes, labels, masks = [], [], []
    for r in range(spec.rows):
        for c in range(spec.cols):
            if rng.random() < spec.blank_prob:
                continue
            cls = int(rng.integers(spec.n_classes))
            frac = rng.uniform(*spec.scale_range)
            g = max(16, round(frac * spec.cell_size))
            jx = rng.uniform(-spec.jitter, spec.jitter) * spec.cell_size
            jy = rng.uniform(-spec.jitter, spec.jitter) * spec.cell_size
            illum = rng.uniform(*spec.illumination)

            x0 = int(round(ox + c * spec.cell_size + (spec.cell_size - g) / 2 + jx))
            y0 = int(round(oy + r * spec.cell_size + (spec.cell_size - g) / 2 + jy))
            x0 = min(max(x0, 0), w - g)
            y0 = min(max(y0, 0), h - g)

            glyph = render_glyph(cls, spec.n_classes, g)
            rgb = np.clip(np.rint(glyph[..., :3].astype(np.float64) * illum), 0, 255)
            alpha = glyph[..., 3] > 0
            region = img[y0 : y0 + g, x0 : x0 + g]
            region[alpha] = rgb[alpha].astype(np.uint8)

            ys, xs = np.nonzero(alpha)
            boxes.append(
                [x0 + xs.min(), y0 + ys.min(), x0 + xs.max() + 1.0, y0 + ys.max() + 1.0]
            )
            labels.append(spec.labels[cls])
            if return_masks:
                full = np.zeros((h, w), dtype=bool)
                full[y0 : y0 + g, x0 : x0 + g] = alpha
                masks.append(full)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if return_masks:
        return img, boxes, labels, masks
    return img, boxes, labels


def split_counts(n_scenes: int, fractions: tuple[float, ...]) -> list[int]:
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    bounds = [int(round(f * n_scenes)) for f in np.cumsum(fractions)]
    counts = [bounds[0]] + [bounds[i] - bounds[i - 1] for i in range(1, len(bounds))]
    return counts


def gen_synthetic_dataset(
    spec: SceneSpec,
    n_scenes: int,
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    out_dir=".",
) -> dict[str, Path]:
    """Write rack-image splits plus the query-image db under *out_dir*.

    Layout: ``train|val|test/images/*.png`` with an ``annotations.jsonl``
    per split, and ``query/<label>.png`` with ``query.jsonl``. Scene
    indices are split contiguously, so no scene leaks across splits.
    """
    out_dir = Path(out_dir)
    counts = split_counts(n_scenes, split_fractions)
    names = ("train", "val", "test")

    paths: dict[str, Path] = {}
    scene_idx = 0
    for split, count in zip(names, counts):
        split_dir = out_dir / split
        records = []
        for _ in range(count):
            rng = np.random.default_rng([spec.seed, scene_idx])
            image, boxes, labels = render_scene(spec, rng)
            rel = f"images/scene_{scene_idx:05d}.png"
            save_image(split_dir / rel, image)
            records.append(
                {"image": rel, "boxes": boxes.tolist(), "labels": labels}
            )
            scene_idx += 1
        save_annotations(split_dir / "annotations.jsonl", records)
        paths[split] = split_dir

    query_dir = out_dir / "query"
    query_records = []
    for cls, label in enumerate(spec.labels):
        image = render_query_image(cls, spec.n_classes)
        save_image(query_dir / f"{label}.png", image)
        query_records.append({"label": label, "image": f"{label}.png"})
    save_annotations(query_dir / "query.jsonl", query_records)
    paths["query"] = query_dir
    return paths
