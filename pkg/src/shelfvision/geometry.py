"""Box arithmetic, IoU, greedy NMS and anchor generation.

Shared geometric substrate of localization and evaluation. Boxes are
continuous ``[x1, y1, x2, y2]`` corner coordinates (top-left origin,
``x2 > x1``, ``y2 > y1``), carried around as plain numpy arrays. All
functions are pure, so they are safe to call from any number of workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: w:h aspect ratios 1:1, 1:2 and 2:1, expressed as w/h.
ASPECT_RATIOS = (1.0, 0.5, 2.0)

#: anchor scale (square-root of anchor area, pixels) per pyramid level.
LEVEL_SCALES = {2: 32.0, 3: 64.0, 4: 128.0, 5: 256.0}

#: clamp for log-size regression deltas; larger values signal runaway regression.
MAX_DELTA_LOG_SIZE = 4.0


def check_box(box) -> np.ndarray:
    """Validate a single box and return it as a float64 array of shape (4,)."""
    box = np.asarray(box, dtype=np.float64).reshape(-1)
    if box.shape != (4,):
        raise ValueError(f"expected a single [x1, y1, x2, y2] box, got shape {box.shape}")
    if not np.all(np.isfinite(box)):
        raise ValueError("box coordinates must be finite")
    if box[2] <= box[0] or box[3] <= box[1]:
        raise ValueError(f"box must have strictly positive area, got {box.tolist()}")
    return box


def check_boxes(boxes, allow_empty: bool = True) -> np.ndarray:
    """Validate an (N, 4) array of boxes, returning a float64 copy."""
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.size == 0:
        if not allow_empty:
            raise ValueError("expected at least one box")
        return boxes.reshape(0, 4)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ValueError(f"expected boxes of shape (N, 4), got {boxes.shape}")
    if not np.all(np.isfinite(boxes)):
        raise ValueError("box coordinates must be finite")
    if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
        raise ValueError("all boxes must have strictly positive area")
    return boxes


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def box_center(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.stack(
        [(boxes[..., 0] + boxes[..., 2]) / 2.0, (boxes[..., 1] + boxes[..., 3]) / 2.0],
        axis=-1,
    )


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 for disjoint or merely touching."""
    a = check_box(a)
    b = check_box(b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    return float(inter / union)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two box sets; shape (len(a), len(b))."""
    a = check_boxes(a)
    b = check_boxes(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.float64)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, :, 0] * wh[:, :, 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return inter / union


def center_inside(det, gt) -> bool:
    """True iff the center of *det* lies inside *gt* (closed boundary counts)."""
    det = check_box(det)
    gt = check_box(gt)
    cx, cy = (det[0] + det[2]) / 2.0, (det[1] + det[3]) / 2.0
    return bool(gt[0] <= cx <= gt[2] and gt[1] <= cy <= gt[3])


def nms(boxes, scores, iou_threshold: float, max_keep: int | None = None) -> np.ndarray:
    """Greedy non-maximum suppression.

    Repeatedly keeps the highest-scoring remaining box and discards every
    remaining box whose IoU with it exceeds *iou_threshold*. Score ties are
    broken by smaller input index, so the result is deterministic.

    Returns the kept indices in descending score order; indexing the input
    with them yields the surviving boxes.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    boxes = check_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(scores) != len(boxes):
        raise ValueError("boxes and scores must have equal length")
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.intp)
    if not np.all(np.isfinite(scores)) or scores.min() < 0.0 or scores.max() > 1.0:
        raise ValueError("scores must be finite and lie in [0, 1]")

    order = np.argsort(-scores, kind="stable")
    areas = box_area(boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep: list[int] = []
    for pos, idx in enumerate(order):
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = order[pos + 1 :]
        rest = rest[~suppressed[rest]]
        if rest.size == 0:
            continue
        lt = np.maximum(boxes[idx, :2], boxes[rest, :2])
        rb = np.minimum(boxes[idx, 2:], boxes[rest, 2:])
        wh = np.clip(rb - lt, 0.0, None)
        inter = wh[:, 0] * wh[:, 1]
        overlap = inter / (areas[idx] + areas[rest] - inter)
        suppressed[rest[overlap > iou_threshold]] = True
    return np.asarray(keep, dtype=np.intp)


@dataclass(frozen=True)
class AnchorSpec:
    """Anchor layout for one pyramid level: fixed scale, three aspect ratios."""

    level: int
    scale: float
    aspect_ratios: tuple[float, ...] = ASPECT_RATIOS

    def __post_init__(self):
        if self.level not in LEVEL_SCALES:
            raise ValueError(f"level must be one of {sorted(LEVEL_SCALES)}, got {self.level}")
        if self.scale != LEVEL_SCALES[self.level]:
            raise ValueError(
                f"level {self.level} anchors have scale {LEVEL_SCALES[self.level]}, got {self.scale}"
            )

    @property
    def stride(self) -> int:
        return 2 ** self.level

    @classmethod
    def for_level(cls, level: int) -> "AnchorSpec":
        return cls(level=level, scale=LEVEL_SCALES[level])


def generate_anchors(spec: AnchorSpec, feature_h: int, feature_w: int) -> np.ndarray:
    """Tile anchors over a feature map, three per cell.

    Anchors at feature cell (row, col) are centered at
    ``((col + 0.5) * stride, (row + 0.5) * stride)`` and all have area
    ``scale**2``. Row-major cell order, aspect ratios innermost; anchors may
    extend beyond the image (clipping is the caller's concern).
    """
    if feature_h < 1 or feature_w < 1:
        raise ValueError("feature dimensions must be >= 1")
    stride = float(spec.stride)
    ratios = np.asarray(spec.aspect_ratios, dtype=np.float64)
    half_w = spec.scale * np.sqrt(ratios) / 2.0
    half_h = spec.scale / np.sqrt(ratios) / 2.0

    cx = (np.arange(feature_w, dtype=np.float64) + 0.5) * stride
    cy = (np.arange(feature_h, dtype=np.float64) + 0.5) * stride
    cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
    centers = np.stack([cxx.ravel(), cyy.ravel()], axis=1)  # (H*W, 2)

    anchors = np.empty((feature_h * feature_w, len(ratios), 4), dtype=np.float64)
    anchors[:, :, 0] = centers[:, None, 0] - half_w[None, :]
    anchors[:, :, 1] = centers[:, None, 1] - half_h[None, :]
    anchors[:, :, 2] = centers[:, None, 0] + half_w[None, :]
    anchors[:, :, 3] = centers[:, None, 1] + half_h[None, :]
    return anchors.reshape(-1, 4)


def encode_deltas(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Regression targets (dx, dy, dw, dh) that map *anchors* onto *targets*."""
    anchors = check_boxes(anchors)
    targets = check_boxes(targets)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2.0
    acy = anchors[:, 1] + ah / 2.0
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tcx = targets[:, 0] + tw / 2.0
    tcy = targets[:, 1] + th / 2.0
    return np.stack(
        [(tcx - acx) / aw, (tcy - acy) / ah, np.log(tw / aw), np.log(th / ah)], axis=1
    )


def decode_deltas(anchors, deltas) -> np.ndarray:
    """Apply center/log-size deltas to anchors.

    (dx, dy) shift the center by a fraction of the anchor size; (dw, dh)
    scale width and height by ``exp``. Log-size deltas are clamped to
    ``[-4, 4]`` to contain runaway regression output. Accepts a single
    (4,)/(4,) pair or (N, 4)/(N, 4) arrays.
    """
    single = np.asarray(anchors, dtype=np.float64).ndim == 1
    anchors = check_boxes(np.atleast_2d(np.asarray(anchors, dtype=np.float64)))
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if deltas.shape != anchors.shape:
        raise ValueError(f"deltas shape {deltas.shape} does not match anchors {anchors.shape}")
    if not np.all(np.isfinite(deltas)):
        raise ValueError("deltas must be finite")

    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2.0
    acy = anchors[:, 1] + ah / 2.0

    size_clamp = np.clip(deltas[:, 2:4], -MAX_DELTA_LOG_SIZE, MAX_DELTA_LOG_SIZE)
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(size_clamp[:, 0])
    h = ah * np.exp(size_clamp[:, 1])

    out = np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=1)
    return out[0] if single else out


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    """Clamp box coordinates to ``[0, width] x [0, height]``.

    Clipping can collapse a fully-outside box to zero area; callers that
    require valid boxes should drop degenerate rows afterwards.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, float(width))
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, float(height))
    return boxes
