"""Class-agnostic product localization.

A single region-proposal head is shared across all pyramid levels; its
objectness and box-delta maps are decoded against per-level anchors,
pooled, filtered with greedy NMS and refined by a small box-regression
head on RoI-pooled features. There is no classification head: recognition
is a separate stage, so the detector only has to say "product here".

Training follows an SGD-with-momentum schedule: linear warmup over the
first epoch's steps up to a maximum learning rate, a long first phase at
that rate, then a second phase at a reduced rate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from . import archive
from .data import image_to_tensor
from .geometry import (
    AnchorSpec,
    LEVEL_SCALES,
    check_boxes,
    clip_boxes,
    decode_deltas,
    encode_deltas,
    generate_anchors,
    iou_matrix,
    nms,
)
from .pyramid import Backbone, FeaturePyramid, init_parameters, load_module_arrays, module_arrays

ANCHORS_PER_CELL = 3
RPN_POS_IOU = 0.7
RPN_NEG_IOU = 0.3
RPN_SAMPLES = 256
RPN_POS_FRACTION = 0.5
ROI_MATCH_IOU = 0.5


@dataclass
class RpnOutput:
    """Per-level proposal head output; objectness is already in [0, 1]."""

    objectness: torch.Tensor  # (A, H, W) or (N, A, H, W)
    logits: torch.Tensor
    deltas: torch.Tensor  # (4A, H, W) or (N, 4A, H, W)

    def select(self, i: int) -> "RpnOutput":
        return RpnOutput(self.objectness[i], self.logits[i], self.deltas[i])


class RpnHead(nn.Module):
    """Shared sliding-window head: 3x3 conv trunk, objectness + delta branches."""

    def __init__(self, in_channels: int, channels: int = 256, anchors_per_cell: int = ANCHORS_PER_CELL):
        super().__init__()
        self.anchors_per_cell = anchors_per_cell
        self.conv = nn.Conv2d(in_channels, channels, 3, padding=1)
        self.objectness = nn.Conv2d(channels, anchors_per_cell, 1)
        self.deltas = nn.Conv2d(channels, 4 * anchors_per_cell, 1)

    def forward(self, p: torch.Tensor) -> RpnOutput:
        batched = p.dim() == 4
        x = p if batched else p.unsqueeze(0)
        h = F.relu(self.conv(x))
        logits = self.objectness(h)
        deltas = self.deltas(h)
        out = RpnOutput(torch.sigmoid(logits), logits, deltas)
        return out if batched else out.select(0)


class RoiHead(nn.Module):
    """Two fully connected layers and the final 4-output box regressor."""

    def __init__(self, in_channels: int, roi_size: int = 7, hidden: int = 256):
        super().__init__()
        self.roi_size = roi_size
        self.fc1 = nn.Linear(in_channels * roi_size * roi_size, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.regressor = nn.Linear(hidden, 4)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        x = pooled.flatten(start_dim=1) if pooled.dim() == 4 else pooled.flatten().unsqueeze(0)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return self.regressor(x)


class DetectorNet(nn.Module):
    """Backbone + pyramid + shared RPN + RoI box regressor."""

    def __init__(
        self,
        widths: tuple[int, ...],
        pyramid_depth: int = 256,
        rpn_channels: int = 256,
        roi_size: int = 7,
        roi_hidden: int = 256,
    ):
        super().__init__()
        self.backbone = Backbone(widths)
        self.fpn = FeaturePyramid(tuple(widths[1:]), depth=pyramid_depth)
        self.rpn = RpnHead(pyramid_depth, rpn_channels)
        self.roi_head = RoiHead(pyramid_depth, roi_size, roi_hidden)

    def pyramid(self, images: torch.Tensor) -> dict[int, torch.Tensor]:
        return self.fpn(self.backbone(images))

    def rpn_all(self, pyramid: dict[int, torch.Tensor]) -> dict[int, RpnOutput]:
        return {lvl: self.rpn(p) for lvl, p in pyramid.items()}


def flatten_rpn_output(out: RpnOutput) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Flatten (A, H, W) maps into per-anchor rows matching anchor order.

    Anchor order is row-major over cells with the aspect-ratio index
    innermost, i.e. anchor ``(row * W + col) * A + a``.
    """
    a = out.objectness.shape[0]
    obj = out.objectness.permute(1, 2, 0).reshape(-1)
    logits = out.logits.permute(1, 2, 0).reshape(-1)
    h, w = out.deltas.shape[-2:]
    deltas = out.deltas.reshape(a, 4, h, w).permute(2, 3, 0, 1).reshape(-1, 4)
    return obj, logits, deltas


def level_anchors(feature_shapes: dict[int, tuple[int, int]]) -> dict[int, np.ndarray]:
    return {
        lvl: generate_anchors(AnchorSpec.for_level(lvl), h, w)
        for lvl, (h, w) in feature_shapes.items()
    }


def propose(
    rpn_outputs: dict[int, RpnOutput],
    anchors: dict[int, np.ndarray],
    image_size: tuple[int, int],
    top_n: int,
    nms_threshold: float = 0.7,
) -> tuple[np.ndarray, np.ndarray]:
    """Decode per-level deltas, pool all levels, NMS, keep the top_n.

    Candidates are clipped to the image; degenerate (area < 1) and
    zero-objectness anchors are dropped. Levels are always processed in
    ascending order so the result does not depend on dict iteration
    order. Returns (boxes, scores) sorted by descending objectness.
    """
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    width, height = image_size
    all_boxes, all_scores = [], []
    for lvl in sorted(rpn_outputs):
        obj, _, deltas = flatten_rpn_output(rpn_outputs[lvl])
        boxes = decode_deltas(anchors[lvl], deltas.detach().cpu().numpy())
        all_boxes.append(boxes)
        all_scores.append(obj.detach().cpu().numpy().astype(np.float64))
    boxes = clip_boxes(np.concatenate(all_boxes), width, height)
    scores = np.concatenate(all_scores)

    wh = boxes[:, 2:] - boxes[:, :2]
    valid = ((wh[:, 0] * wh[:, 1]) >= 1.0) & (scores > 0.0)
    boxes, scores = boxes[valid], scores[valid]
    if len(boxes) == 0:
        return boxes, scores
    keep = nms(boxes, scores, nms_threshold, max_keep=top_n)
    return boxes[keep], scores[keep]


def roi_level(box: np.ndarray) -> int:
    """Pyramid level whose anchor scale is nearest (in log2) to the box size."""
    w = float(box[2] - box[0])
    h = float(box[3] - box[1])
    size = math.sqrt(w * h)
    lvl = 2 + math.floor(math.log2(size / LEVEL_SCALES[2]) + 0.5)
    return min(max(lvl, 2), 5)


def roi_pool(
    pyramid: dict[int, torch.Tensor],
    box,
    image_size: tuple[int, int],
    out_size: int = 7,
) -> torch.Tensor:
    """Pool one box into a fixed (d, S, S) grid of cell-wise maxima.

    The box picks its pyramid level by scale, is projected onto that level
    (floor/ceil to whole feature pixels, at least one pixel per axis) and
    max-pooled into an S x S grid.
    """
    box = np.asarray(box, dtype=np.float64)
    width, height = image_size
    if box[2] <= 0 or box[3] <= 0 or box[0] >= width or box[1] >= height:
        raise ValueError(f"box {box.tolist()} lies outside the {width}x{height} image")
    lvl = roi_level(box)
    fmap = pyramid[lvl]
    if fmap.dim() == 4:
        fmap = fmap[0]
    stride = float(2 ** lvl)
    fh, fw = fmap.shape[-2:]
    x1 = min(max(int(math.floor(box[0] / stride)), 0), fw - 1)
    y1 = min(max(int(math.floor(box[1] / stride)), 0), fh - 1)
    x2 = min(max(int(math.ceil(box[2] / stride)), x1 + 1), fw)
    y2 = min(max(int(math.ceil(box[3] / stride)), y1 + 1), fh)
    return F.adaptive_max_pool2d(fmap[:, y1:y2, x1:x2], out_size)


def match_anchors(
    anchors: np.ndarray, gt_boxes: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Label anchors 1 (object), 0 (background) or -1 (ignored).

    An anchor is positive when its best IoU exceeds the positive threshold
    or when it is the best anchor for some ground-truth box; negative when
    its best IoU is below the negative threshold. Returns (labels,
    matched_gt_index).
    """
    gt_boxes = check_boxes(gt_boxes, allow_empty=False)
    ious = iou_matrix(anchors, gt_boxes)
    matched = ious.argmax(axis=1)
    best_iou = ious[np.arange(len(anchors)), matched]

    labels = np.full(len(anchors), -1, dtype=np.int8)
    labels[best_iou < RPN_NEG_IOU] = 0
    labels[best_iou > RPN_POS_IOU] = 1

    # every gt keeps its best-overlapping anchor(s), however weak
    per_gt_best = ious.max(axis=0)
    for j in range(len(gt_boxes)):
        if per_gt_best[j] <= 0.0:
            continue
        winners = np.nonzero(ious[:, j] == per_gt_best[j])[0]
        labels[winners] = 1
        matched[winners] = j
    return labels, matched


def sample_anchors(
    labels: np.ndarray,
    rng: np.random.Generator,
    total: int = RPN_SAMPLES,
    pos_fraction: float = RPN_POS_FRACTION,
) -> tuple[np.ndarray, np.ndarray]:
    """Pick a class-balanced training subset of anchor indices."""
    positive = np.nonzero(labels == 1)[0]
    negative = np.nonzero(labels == 0)[0]
    n_pos = min(len(positive), int(total * pos_fraction))
    n_neg = min(len(negative), total - n_pos)
    pos = rng.permutation(positive)[:n_pos] if len(positive) else positive
    neg = rng.permutation(negative)[:n_neg] if len(negative) else negative
    return np.sort(pos), np.sort(neg)


def rpn_loss(
    rpn_outputs: dict[int, RpnOutput],
    anchors: dict[int, np.ndarray],
    gt_boxes: np.ndarray,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, dict]:
    """Objectness BCE plus smooth-L1 on positive-anchor deltas.

    The regression term is summed over positive anchors and normalized by
    the number of sampled anchors.
    """
    levels = sorted(rpn_outputs)
    logits = torch.cat([flatten_rpn_output(rpn_outputs[lvl])[1] for lvl in levels])
    deltas = torch.cat([flatten_rpn_output(rpn_outputs[lvl])[2] for lvl in levels])
    anchor_arr = np.concatenate([anchors[lvl] for lvl in levels])

    labels, matched = match_anchors(anchor_arr, gt_boxes)
    pos, neg = sample_anchors(labels, rng)
    sampled = np.concatenate([pos, neg])
    n_sampled = max(len(sampled), 1)

    target = torch.zeros(len(sampled), dtype=logits.dtype)
    target[: len(pos)] = 1.0
    cls_loss = F.binary_cross_entropy_with_logits(logits[sampled], target)

    if len(pos):
        reg_target = torch.from_numpy(
            encode_deltas(anchor_arr[pos], gt_boxes[matched[pos]])
        ).to(deltas.dtype)
        reg_loss = F.smooth_l1_loss(deltas[pos], reg_target, reduction="sum") / n_sampled
    else:
        reg_loss = deltas.sum() * 0.0
    stats = {"n_pos": int(len(pos)), "n_neg": int(len(neg))}
    return cls_loss + reg_loss, stats


def roi_head_loss(
    roi_head: RoiHead,
    pyramid: dict[int, torch.Tensor],
    proposals: np.ndarray,
    gt_boxes: np.ndarray,
    image_size: tuple[int, int],
    rng: np.random.Generator,
    max_samples: int = 64,
) -> tuple[torch.Tensor, dict]:
    """Smooth-L1 between predicted and matched-target deltas.

    Only proposals with IoU >= 0.5 against some ground-truth box
    participate; with no matches the loss is 0 and the matched count is
    reported as 0.
    """
    gt_boxes = check_boxes(gt_boxes, allow_empty=False)
    stats = {"n_matched": 0}
    if len(proposals) == 0:
        return torch.zeros(()), stats
    ious = iou_matrix(proposals, gt_boxes)
    best_gt = ious.argmax(axis=1)
    matched_idx = np.nonzero(ious.max(axis=1) >= ROI_MATCH_IOU)[0]
    if len(matched_idx) == 0:
        return torch.zeros(()), stats
    if len(matched_idx) > max_samples:
        matched_idx = np.sort(rng.permutation(matched_idx)[:max_samples])
    stats["n_matched"] = int(len(matched_idx))

    pooled = torch.stack(
        [roi_pool(pyramid, proposals[i], image_size, roi_head.roi_size) for i in matched_idx]
    )
    pred = roi_head(pooled)
    target = torch.from_numpy(
        encode_deltas(proposals[matched_idx], gt_boxes[best_gt[matched_idx]])
    ).to(pred.dtype)
    return F.smooth_l1_loss(pred, target, reduction="mean"), stats


@dataclass
class TrainSchedule:
    """SGD fine-tuning schedule: warmup, long phase, reduced phase."""

    momentum: float = 0.8
    weight_decay: float = 5e-2
    batch_size: int = 8
    warmup_factor: float = 1e-3
    max_lr: float = 5e-2
    phase1_epochs: int = 25
    phase2_lr: float = 5e-3
    phase2_epochs: int = 15
    train_proposals: int = 1000

    def __post_init__(self):
        for name in ("momentum", "weight_decay", "batch_size", "warmup_factor", "max_lr", "phase2_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.phase1_epochs < 0 or self.phase2_epochs < 0 or self.train_proposals < 1:
            raise ValueError("epoch counts must be >= 0 and train_proposals >= 1")
        if self.warmup_factor >= 1:
            raise ValueError("warmup_factor must be < 1")

    @property
    def total_epochs(self) -> int:
        return self.phase1_epochs + self.phase2_epochs

    def steps_per_epoch(self, n_scenes: int) -> int:
        return math.ceil(n_scenes / self.batch_size)


def schedule_lr(step: int, n_scenes: int, schedule: TrainSchedule) -> float:
    """Closed-form learning rate at a global 0-based step."""
    spe = schedule.steps_per_epoch(n_scenes)
    if step >= schedule.phase1_epochs * spe:
        return schedule.phase2_lr
    if step < spe:
        return schedule.max_lr * (
            schedule.warmup_factor + (1.0 - schedule.warmup_factor) * step / spe
        )
    return schedule.max_lr


class ProductLocalizer(BaseEstimator):
    """Trainable class-agnostic shelf-product detector.

    fit(X, y) takes a list of RGB uint8 images and a matching list of
    (M, 4) ground-truth box arrays; predict(X) returns one
    (boxes, scores) pair per image, scores descending.

    Defaults are the desk-scale preset; the full-scale preset uses
    ``backbone_widths=(64, 64, 128, 256, 512)``, ``pyramid_depth=256`` and
    ``rpn_channels=256``.
    """

    def __init__(
        self,
        backbone_widths=(16, 32, 64, 128, 256),
        pyramid_depth=64,
        rpn_channels=64,
        roi_size=7,
        roi_hidden=256,
        momentum=0.8,
        weight_decay=5e-2,
        batch_size=8,
        warmup_factor=1e-3,
        max_lr=5e-2,
        phase1_epochs=25,
        phase2_lr=5e-3,
        phase2_epochs=15,
        train_proposals=1000,
        roi_samples=64,
        proposal_nms=0.7,
        detection_nms=0.5,
        score_threshold=0.05,
        test_proposals=1000,
        random_state=0,
    ):
        self.backbone_widths = backbone_widths
        self.pyramid_depth = pyramid_depth
        self.rpn_channels = rpn_channels
        self.roi_size = roi_size
        self.roi_hidden = roi_hidden
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.warmup_factor = warmup_factor
        self.max_lr = max_lr
        self.phase1_epochs = phase1_epochs
        self.phase2_lr = phase2_lr
        self.phase2_epochs = phase2_epochs
        self.train_proposals = train_proposals
        self.roi_samples = roi_samples
        self.proposal_nms = proposal_nms
        self.detection_nms = detection_nms
        self.score_threshold = score_threshold
        self.test_proposals = test_proposals
        self.random_state = random_state

    # -- construction ----------------------------------------------------

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            warmup_factor=self.warmup_factor,
            max_lr=self.max_lr,
            phase1_epochs=self.phase1_epochs,
            phase2_lr=self.phase2_lr,
            phase2_epochs=self.phase2_epochs,
            train_proposals=self.train_proposals,
        )

    def _build_net(self) -> DetectorNet:
        net = DetectorNet(
            tuple(self.backbone_widths),
            pyramid_depth=self.pyramid_depth,
            rpn_channels=self.rpn_channels,
            roi_size=self.roi_size,
            roi_hidden=self.roi_hidden,
        )
        init_parameters(net, self.random_state)
        return net

    # -- training ----------------------------------------------------------

    def fit(self, X, y):
        images, gt_list = self._validate_dataset(X, y)
        schedule = self.schedule()
        net = self._build_net()
        optimizer = torch.optim.SGD(
            net.parameters(),
            lr=schedule.max_lr * schedule.warmup_factor,
            momentum=schedule.momentum,
            weight_decay=schedule.weight_decay,
        )
        rng = np.random.default_rng(self.random_state)
        n = len(images)
        anchor_cache: dict[tuple, dict[int, np.ndarray]] = {}
        self.train_log_ = []

        step = 0
        for epoch in range(schedule.total_epochs):
            order = rng.permutation(n)
            for start in range(0, n, schedule.batch_size):
                batch = order[start : start + schedule.batch_size]
                lr = schedule_lr(step, n, schedule)
                for group in optimizer.param_groups:
                    group["lr"] = lr

                optimizer.zero_grad()
                rpn_total = torch.zeros(())
                roi_total = torch.zeros(())
                for group_idx in self._group_by_shape(images, batch):
                    stack = torch.stack([image_to_tensor(images[i]) for i in group_idx])
                    pyramid = net.pyramid(stack)
                    outputs = net.rpn_all(pyramid)
                    shape_key = tuple(sorted((l, p.shape[-2:]) for l, p in pyramid.items()))
                    if shape_key not in anchor_cache:
                        anchor_cache[shape_key] = level_anchors(
                            {l: tuple(p.shape[-2:]) for l, p in pyramid.items()}
                        )
                    anchors = anchor_cache[shape_key]
                    h, w = stack.shape[-2:]
                    for j, i in enumerate(group_idx):
                        per_image = {l: o.select(j) for l, o in outputs.items()}
                        per_pyramid = {l: p[j] for l, p in pyramid.items()}
                        loss_r, _ = rpn_loss(per_image, anchors, gt_list[i], rng)
                        prop_boxes, _ = propose(
                            per_image,
                            anchors,
                            (w, h),
                            top_n=schedule.train_proposals,
                            nms_threshold=self.proposal_nms,
                        )
                        loss_h, _ = roi_head_loss(
                            net.roi_head,
                            per_pyramid,
                            prop_boxes,
                            gt_list[i],
                            (w, h),
                            rng,
                            max_samples=self.roi_samples,
                        )
                        rpn_total = rpn_total + loss_r
                        roi_total = roi_total + loss_h
                total = (rpn_total + roi_total) / len(batch)
                if total.requires_grad:
                    total.backward()
                    optimizer.step()
                self.train_log_.append(
                    {
                        "epoch": epoch,
                        "step": step,
                        "lr": lr,
                        "rpn_loss": float(rpn_total.detach()) / len(batch),
                        "roi_loss": float(roi_total.detach()) / len(batch),
                    }
                )
                step += 1

        net.eval()
        self.model_ = net
        return self

    def _validate_dataset(self, X, y):
        if y is None or len(X) != len(y):
            raise ValueError("fit expects matching image and ground-truth-box lists")
        images, gt_list = [], []
        for i, (img, boxes) in enumerate(zip(X, y)):
            boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
            if len(boxes) == 0:
                warnings.warn(f"scene {i} has no ground-truth boxes; excluded from training")
                continue
            images.append(img)
            gt_list.append(check_boxes(boxes))
        if not images:
            raise ValueError("training dataset is empty")
        return images, gt_list

    @staticmethod
    def _group_by_shape(images, indices):
        groups: dict[tuple, list[int]] = {}
        for i in indices:
            groups.setdefault(images[i].shape, []).append(int(i))
        return groups.values()

    # -- inference ---------------------------------------------------------

    def detect(self, image: np.ndarray, max_dets: int = 100) -> tuple[np.ndarray, np.ndarray]:
        """Detect products in one image; returns (boxes, scores), scores descending."""
        check_is_fitted(self, "model_")
        net = self.model_
        with torch.no_grad():
            pyramid = net.pyramid(image_to_tensor(image).unsqueeze(0))
            outputs = {l: o.select(0) for l, o in net.rpn_all(pyramid).items()}
            pyramid = {l: p[0] for l, p in pyramid.items()}
            h, w = image.shape[:2]
            anchors = level_anchors({l: tuple(p.shape[-2:]) for l, p in pyramid.items()})
            prop_boxes, prop_scores = propose(
                outputs, anchors, (w, h), top_n=self.test_proposals, nms_threshold=self.proposal_nms
            )
            if len(prop_boxes) == 0:
                return np.zeros((0, 4)), np.zeros(0)
            pooled = torch.stack(
                [roi_pool(pyramid, b, (w, h), net.roi_head.roi_size) for b in prop_boxes]
            )
            deltas = net.roi_head(pooled).cpu().numpy().astype(np.float64)

        boxes = clip_boxes(decode_deltas(prop_boxes, deltas), w, h)
        wh = boxes[:, 2:] - boxes[:, :2]
        valid = ((wh[:, 0] * wh[:, 1]) >= 1.0) & (prop_scores >= self.score_threshold)
        boxes, scores = boxes[valid], prop_scores[valid]
        if len(boxes) == 0:
            return np.zeros((0, 4)), np.zeros(0)
        keep = nms(boxes, scores, self.detection_nms, max_keep=max_dets)
        return boxes[keep], scores[keep]

    def predict(self, X, max_dets: int = 100) -> list[tuple[np.ndarray, np.ndarray]]:
        return [self.detect(img, max_dets=max_dets) for img in X]

    # -- persistence ---------------------------------------------------------

    def _config_meta(self) -> dict:
        return {
            "kind": "detector",
            "backbone_widths": list(self.backbone_widths),
            "pyramid_depth": self.pyramid_depth,
            "rpn_channels": self.rpn_channels,
            "roi_size": self.roi_size,
            "roi_hidden": self.roi_hidden,
        }

    def dump_weights(self) -> bytes:
        check_is_fitted(self, "model_")
        return archive.dump_arrays(module_arrays(self.model_), self._config_meta())

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.dump_weights())

    @classmethod
    def load(cls, path, **overrides) -> "ProductLocalizer":
        arrays, meta = archive.load_archive(path)
        if meta.get("kind") != "detector":
            raise archive.ArchiveError(f"{path} is not a detector weights archive")
        est = cls(
            backbone_widths=tuple(meta["backbone_widths"]),
            pyramid_depth=meta["pyramid_depth"],
            rpn_channels=meta["rpn_channels"],
            roi_size=meta["roi_size"],
            roi_hidden=meta["roi_hidden"],
            **overrides,
        )
        net = est._build_net()
        load_module_arrays(net, arrays)
        net.eval()
        est.model_ = net
        est.train_log_ = []
        return est
