"""Detection and recognition evaluation protocols.

Four pure report functions over (predictions, ground truth):

* :func:`eval_coco` — single-category average precision (101-point
  interpolation) and average recall over an IoU-threshold grid, with
  per-image detection caps (maxDets).
* :func:`eval_map_pr_05` — per-class AP at IoU > 0.5 with a label-match
  requirement (all-point interpolation), plus product recall.
* :func:`eval_center_f1` — center-in-box true/false-positive counting
  with label agreement.
* :func:`eval_topk_map` — per-image precision/recall from whether the
  true label appears among each detection's top-K candidates, averaged
  over images and over K.

Detections are canonically re-ordered (score descending, then box
coordinates) before matching, so input permutations never change a
report. All rates lie in [0, 1]; metrics that would divide by zero
ground truth are reported as ``None`` ("undefined"), never silently 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import center_inside, check_boxes, iou_matrix

COCO_IOU_GRID = tuple(np.round(np.arange(0.5, 0.96, 0.05), 2))
RECALL_GRID = np.linspace(0.0, 1.0, 101)


@dataclass
class SceneGroundTruth:
    image_id: str
    boxes: np.ndarray
    labels: list[str] | None = None

    def __post_init__(self):
        self.boxes = check_boxes(self.boxes) if np.size(self.boxes) else np.zeros((0, 4))
        if self.labels is not None and len(self.labels) != len(self.boxes):
            raise ValueError(f"{self.image_id}: labels do not match boxes")


@dataclass
class SceneDetections:
    image_id: str
    boxes: np.ndarray
    scores: np.ndarray
    labels: list[str] | None = None
    topk_labels: list[list[str]] | None = None

    def __post_init__(self):
        self.boxes = check_boxes(self.boxes) if np.size(self.boxes) else np.zeros((0, 4))
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.scores) != len(self.boxes):
            raise ValueError(f"{self.image_id}: scores do not match boxes")
        if len(self.scores) and (self.scores.min() < 0 or self.scores.max() > 1):
            raise ValueError(f"{self.image_id}: scores must lie in [0, 1]")
        if self.labels is not None and len(self.labels) != len(self.boxes):
            raise ValueError(f"{self.image_id}: labels do not match boxes")
        if self.topk_labels is not None:
            for ranked in self.topk_labels:
                if len(set(ranked)) != len(ranked):
                    raise ValueError(f"{self.image_id}: ranked labels must be distinct")

    def canonical_order(self) -> np.ndarray:
        """Content-based ordering: score desc, then box coords, then label."""
        if len(self.boxes) == 0:
            return np.zeros(0, dtype=np.intp)
        labels = self.labels if self.labels is not None else [""] * len(self.boxes)
        keys = sorted(
            range(len(self.boxes)),
            key=lambda i: (-self.scores[i], *self.boxes[i].tolist(), labels[i]),
        )
        return np.asarray(keys, dtype=np.intp)


@dataclass
class EvalReport:
    protocol: str
    metrics: dict
    counts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "metrics": self.metrics,
            "counts": self.counts,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"protocol: {self.protocol}"]
        for name, value in self.metrics.items():
            shown = "undefined" if value is None else f"{value:.4f}"
            lines.append(f"  {name:<24s} {shown}")
        for name, value in self.counts.items():
            lines.append(f"  {name:<24s} {value}")
        return "\n".join(lines)


def _pair_scenes(
    detections: list[SceneDetections], ground_truth: list[SceneGroundTruth]
) -> list[tuple[SceneDetections, SceneGroundTruth]]:
    det_by_id = {d.image_id: d for d in detections}
    if len(det_by_id) != len(detections):
        raise ValueError("duplicate image ids in detections")
    gt_by_id = {g.image_id: g for g in ground_truth}
    if len(gt_by_id) != len(ground_truth):
        raise ValueError("duplicate image ids in ground truth")
    ids = [g.image_id for g in ground_truth]
    ids += [d.image_id for d in detections if d.image_id not in gt_by_id]
    pairs = []
    for image_id in ids:
        det = det_by_id.get(image_id) or SceneDetections(image_id, np.zeros((0, 4)), np.zeros(0))
        gt = gt_by_id.get(image_id) or SceneGroundTruth(image_id, np.zeros((0, 4)))
        pairs.append((det, gt))
    return pairs


def _greedy_match(det_boxes, gt_boxes, iou_thr: float, strict: bool) -> tuple[np.ndarray, np.ndarray]:
    """Score-ordered greedy matching; each gt is matched at most once.

    det_boxes must already be in evaluation order. Returns per-detection
    true-positive flags and per-detection matched gt indices (-1 when
    unmatched).
    """
    tp = np.zeros(len(det_boxes), dtype=bool)
    assign = np.full(len(det_boxes), -1, dtype=np.intp)
    if len(det_boxes) == 0 or len(gt_boxes) == 0:
        return tp, assign
    ious = iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for d in range(len(det_boxes)):
        best, best_iou = -1, -1.0
        for g in range(len(gt_boxes)):
            if taken[g]:
                continue
            ok = ious[d, g] > iou_thr if strict else ious[d, g] >= iou_thr
            if ok and ious[d, g] > best_iou:
                best, best_iou = g, ious[d, g]
        if best >= 0:
            tp[d] = True
            assign[d] = best
            taken[best] = True
    return tp, assign


def _precision_envelope(tp: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1)
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    return recall, precision


def _ap_101(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP over the standard recall grid."""
    if len(tp) == 0:
        return 0.0
    recall, precision = _precision_envelope(tp, n_gt)
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def _ap_all_point(tp: np.ndarray, n_gt: int) -> float:
    """Exact area under the interpolated precision-recall curve."""
    if len(tp) == 0:
        return 0.0
    recall, precision = _precision_envelope(tp, n_gt)
    prev = 0.0
    ap = 0.0
    for r, p in zip(recall, precision):
        ap += (r - prev) * p
        prev = r
    return float(ap)


def _ranked_tp(pairs, iou_thr: float, max_dets: int) -> tuple[np.ndarray, int]:
    """Global score-ranked TP flags at one threshold, plus matched-gt count."""
    rows = []
    matched_total = 0
    for det, gt in pairs:
        order = det.canonical_order()[:max_dets]
        boxes = det.boxes[order]
        tp, _ = _greedy_match(boxes, gt.boxes, iou_thr, strict=False)
        matched_total += int(tp.sum())
        for pos in range(len(boxes)):
            rows.append((-det.scores[order[pos]], det.image_id, pos, tp[pos]))
    rows.sort(key=lambda r: r[:3])
    return np.asarray([r[3] for r in rows], dtype=bool), matched_total


def eval_coco(
    detections: list[SceneDetections],
    ground_truth: list[SceneGroundTruth],
    iou_thresholds=None,
    max_dets_list: tuple[int, ...] = (1, 10, 100),
) -> EvalReport:
    """Single-category COCO-style AP/AR report.

    AP rows use the largest maxDets cap; AR is reported per cap, averaged
    over the IoU threshold grid.
    """
    if iou_thresholds is None:
        iou_thresholds = COCO_IOU_GRID
    iou_thresholds = [float(t) for t in iou_thresholds]
    if sorted(iou_thresholds) != iou_thresholds:
        raise ValueError("iou_thresholds must be ascending")
    max_dets_list = tuple(sorted(int(m) for m in max_dets_list))
    pairs = _pair_scenes(detections, ground_truth)
    n_gt = sum(len(gt.boxes) for _, gt in pairs)
    config = {"iou_thresholds": iou_thresholds, "max_dets": list(max_dets_list)}
    counts = {"n_images": len(pairs), "n_gt": n_gt, "n_det": sum(len(d.boxes) for d, _ in pairs)}

    if n_gt == 0:
        metrics = {"AP@0.50": None, "AP@0.75": None, "AP": None}
        metrics.update({f"AR@{m}": None for m in max_dets_list})
        return EvalReport("coco", metrics, counts, config)

    cap = max(max_dets_list)
    ap_by_thr = {}
    for thr in iou_thresholds:
        tp, _ = _ranked_tp(pairs, thr, cap)
        ap_by_thr[thr] = _ap_101(tp, n_gt)
    recalls = {
        m: float(np.mean([_ranked_tp(pairs, thr, m)[1] / n_gt for thr in iou_thresholds]))
        for m in max_dets_list
    }

    metrics = {
        "AP@0.50": ap_by_thr.get(0.5),
        "AP@0.75": ap_by_thr.get(0.75),
        "AP": float(np.mean(list(ap_by_thr.values()))),
    }
    metrics.update({f"AR@{m}": recalls[m] for m in max_dets_list})
    return EvalReport("coco", metrics, counts, config)


def eval_map_pr_05(
    detections: list[SceneDetections], ground_truth: list[SceneGroundTruth]
) -> EvalReport:
    """Mean average precision and product recall at IoU > 0.5 with label match.

    A prediction is correct when its label equals the ground-truth label
    and the boxes overlap with IoU strictly greater than 0.5; AP is
    all-point interpolated per class and averaged over the classes present
    in the ground truth. Duplicate correct detections of one instance
    count once toward recall.
    """
    pairs = _pair_scenes(detections, ground_truth)
    _require_labels(pairs)
    classes = sorted({l for _, gt in pairs for l in (gt.labels or [])})
    n_gt = sum(len(gt.boxes) for _, gt in pairs)
    counts = {"n_images": len(pairs), "n_gt": n_gt, "n_classes": len(classes)}
    config = {"iou": 0.5}
    if n_gt == 0:
        return EvalReport("map-pr-0.5", {"mAP@0.5": None, "PR@0.5": None}, counts, config)

    ap_per_class = []
    matched_total = 0
    for cls in classes:
        rows = []
        cls_gt = 0
        for det, gt in pairs:
            gt_labels = np.asarray(gt.labels or [], dtype=object)
            gt_boxes = gt.boxes[gt_labels == cls] if len(gt.boxes) else gt.boxes
            cls_gt += len(gt_boxes)
            order = [i for i in det.canonical_order() if det.labels[i] == cls]
            boxes = det.boxes[order]
            tp, _ = _greedy_match(boxes, gt_boxes, 0.5, strict=True)
            matched_total += int(tp.sum())
            for pos in range(len(boxes)):
                rows.append((-det.scores[order[pos]], det.image_id, pos, tp[pos]))
        if cls_gt == 0:
            continue
        rows.sort(key=lambda r: r[:3])
        tp_flags = np.asarray([r[3] for r in rows], dtype=bool)
        ap_per_class.append(_ap_all_point(tp_flags, cls_gt))

    metrics = {
        "mAP@0.5": float(np.mean(ap_per_class)),
        "PR@0.5": matched_total / n_gt,
    }
    counts["matched"] = matched_total
    return EvalReport("map-pr-0.5", metrics, counts, config)


def eval_center_f1(
    detections: list[SceneDetections], ground_truth: list[SceneGroundTruth]
) -> EvalReport:
    """Center-in-box precision/recall/F1 with label agreement.

    Each detection is assigned to at most one ground-truth box: the one
    containing its center with the highest IoU. The first (highest-score)
    correct-label detection on a product is its TP; further correct ones,
    wrong-label assignments and stray centers are FPs. Products with no
    correct detection are FNs, so TP + FN equals the instance count.
    """
    pairs = _pair_scenes(detections, ground_truth)
    _require_labels(pairs)
    n_gt = sum(len(gt.boxes) for _, gt in pairs)
    tp = fp = fn = 0
    for det, gt in pairs:
        assigned: dict[int, list[int]] = {g: [] for g in range(len(gt.boxes))}
        order = det.canonical_order()
        ious = iou_matrix(det.boxes, gt.boxes) if len(det.boxes) and len(gt.boxes) else None
        for i in order:
            containing = [
                g for g in range(len(gt.boxes)) if center_inside(det.boxes[i], gt.boxes[g])
            ]
            if not containing:
                fp += 1
                continue
            best = max(containing, key=lambda g: (ious[i, g], -g))
            assigned[best].append(int(i))
        for g, det_ids in assigned.items():
            correct = [i for i in det_ids if det.labels[i] == gt.labels[g]]
            wrong = len(det_ids) - len(correct)
            fp += wrong
            if correct:
                tp += 1
                fp += len(correct) - 1
            else:
                fn += 1

    counts = {"TP": tp, "FP": fp, "FN": fn, "n_gt": n_gt}
    if n_gt == 0:
        return EvalReport("center-f1", {"precision": None, "recall": None, "F1": None}, counts)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return EvalReport(
        "center-f1", {"precision": precision, "recall": recall, "F1": f1}, counts
    )


def eval_topk_map(
    detections: list[SceneDetections],
    ground_truth: list[SceneGroundTruth],
    k_values: tuple[int, ...] = (20, 50),
) -> EvalReport:
    """Top-K retrieval precision/recall, averaged over images then over K.

    Each detection is assigned the label of its highest-IoU ground-truth
    box (it must overlap one); the detection is a TP at K when that label
    appears among its first K ranked candidates. Per-image precision is
    TP/(TP+FP); per-image product recall is the fraction of instances
    recovered by some TP detection. Short ranked lists are simply
    exhausted (padding never matches).
    """
    k_values = tuple(sorted(int(k) for k in k_values))
    if any(k < 1 for k in k_values):
        raise ValueError("k values must be >= 1")
    pairs = _pair_scenes(detections, ground_truth)
    for det, _ in pairs:
        if det.topk_labels is None and len(det.boxes):
            raise ValueError(f"{det.image_id}: detections lack ranked label lists")
    n_gt = sum(len(gt.boxes) for _, gt in pairs)
    counts = {"n_images": len(pairs), "n_gt": n_gt}
    config = {"k_values": list(k_values)}
    if n_gt == 0:
        return EvalReport("topk-map", {"mAP": None, "mAPR": None}, counts, config)

    ap_k, apr_k = {}, {}
    for k in k_values:
        precisions, recalls = [], []
        for det, gt in pairs:
            order = det.canonical_order()
            ious = iou_matrix(det.boxes, gt.boxes) if len(det.boxes) and len(gt.boxes) else None
            hits = 0
            recovered = set()
            for i in order:
                gt_idx = int(ious[i].argmax()) if ious is not None and ious[i].max() > 0 else -1
                ranked = det.topk_labels[i][:k]
                if gt_idx >= 0 and gt.labels[gt_idx] in ranked:
                    hits += 1
                    recovered.add(gt_idx)
            if len(det.boxes):
                precisions.append(hits / len(det.boxes))
            if len(gt.boxes):
                recalls.append(len(recovered) / len(gt.boxes))
        ap_k[k] = float(np.mean(precisions)) if precisions else 0.0
        apr_k[k] = float(np.mean(recalls)) if recalls else 0.0

    metrics = {"mAP": float(np.mean(list(ap_k.values()))), "mAPR": float(np.mean(list(apr_k.values())))}
    for k in k_values:
        metrics[f"AP@{k}"] = ap_k[k]
        metrics[f"APR@{k}"] = apr_k[k]
    return EvalReport("topk-map", metrics, counts, config)


def _require_labels(pairs) -> None:
    for det, gt in pairs:
        if len(det.boxes) and det.labels is None:
            raise ValueError(f"{det.image_id}: detections lack labels")
        if len(gt.boxes) and gt.labels is None:
            raise ValueError(f"{gt.image_id}: ground truth lacks labels")
