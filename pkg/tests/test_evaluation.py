import numpy as np
import pytest

from shelfvision.evaluation import (
    SceneDetections,
    SceneGroundTruth,
    eval_center_f1,
    eval_coco,
    eval_map_pr_05,
    eval_topk_map,
)

import oracles

LABELS = ["p00", "p01", "p02"]


def random_box(rng, lo=0, hi=40):
    x1 = int(rng.integers(lo, hi - 4))
    y1 = int(rng.integers(lo, hi - 4))
    return [x1, y1, x1 + int(rng.integers(3, 12)), y1 + int(rng.integers(3, 12))]


def random_scene(rng, idx, max_gt=4, max_det=5, with_ranked=False):
    """One random scene as both an oracle dict and evaluation dataclasses."""
    n_gt = int(rng.integers(0, max_gt + 1))
    gt_boxes = [random_box(rng) for _ in range(n_gt)]
    gt_labels = [LABELS[int(rng.integers(len(LABELS)))] for _ in range(n_gt)]

    det_boxes, det_labels = [], []
    for g in range(n_gt):
        if rng.random() < 0.75:  # jittered copy of the gt box
            b = list(gt_boxes[g])
            shift = int(rng.integers(-2, 3))
            det_boxes.append([b[0] + shift, b[1] + shift, b[2] + shift, b[3] + shift])
            det_labels.append(gt_labels[g] if rng.random() < 0.7 else LABELS[0])
    for _ in range(int(rng.integers(0, max_det - len(det_boxes) + 1))):
        det_boxes.append(random_box(rng))
        det_labels.append(LABELS[int(rng.integers(len(LABELS)))])
    scores = [float(rng.choice([0.2, 0.4, 0.6, 0.8, 0.95])) for _ in det_boxes]
    ranked = [
        list(rng.permutation(LABELS)) for _ in det_boxes
    ]

    oracle = {
        "boxes": det_boxes,
        "scores": scores,
        "labels": det_labels,
        "ranked": ranked,
        "gt": gt_boxes,
        "gt_labels": gt_labels,
    }
    det = SceneDetections(
        f"img{idx}",
        np.asarray(det_boxes, dtype=float).reshape(-1, 4),
        np.asarray(scores, dtype=float),
        labels=det_labels,
        topk_labels=ranked if with_ranked else None,
    )
    gt = SceneGroundTruth(
        f"img{idx}", np.asarray(gt_boxes, dtype=float).reshape(-1, 4), gt_labels
    )
    return oracle, det, gt


def random_dataset(seed, n_images, **kw):
    rng = np.random.default_rng(seed)
    triples = [random_scene(rng, i, **kw) for i in range(n_images)]
    oracle = [t[0] for t in triples]
    dets = [t[1] for t in triples]
    gts = [t[2] for t in triples]
    return oracle, dets, gts


def shuffled(det: SceneDetections, rng) -> SceneDetections:
    if len(det.boxes) == 0:
        return det
    perm = rng.permutation(len(det.boxes))
    return SceneDetections(
        det.image_id,
        det.boxes[perm],
        det.scores[perm],
        labels=[det.labels[i] for i in perm] if det.labels else None,
        topk_labels=[det.topk_labels[i] for i in perm] if det.topk_labels else None,
    )


class TestEvalCoco:
    def perfect(self, n=3):
        rng = np.random.default_rng(0)
        gts, dets = [], []
        for i in range(n):
            boxes = np.asarray([random_box(rng) for _ in range(3)], dtype=float)
            gts.append(SceneGroundTruth(f"img{i}", boxes))
            dets.append(SceneDetections(f"img{i}", boxes.copy(), np.ones(3)))
        return dets, gts

    def test_perfect_detector(self):
        dets, gts = self.perfect()
        report = eval_coco(dets, gts)
        assert report.metrics["AP@0.50"] == 1.0
        assert report.metrics["AR@100"] == 1.0

    def test_no_detections(self):
        _, gts = self.perfect()
        report = eval_coco([], gts)
        assert report.metrics["AP"] == 0.0
        assert report.metrics["AR@100"] == 0.0

    def test_no_ground_truth_is_undefined(self):
        dets, _ = self.perfect()
        report = eval_coco(dets, [SceneGroundTruth("img0", np.zeros((0, 4)))])
        assert report.metrics["AP@0.50"] is None
        assert report.metrics["AR@10"] is None

    def test_hand_built_scene_matches_oracle(self):
        gt = np.array([[0, 0, 10, 10], [20, 0, 30, 10], [0, 20, 10, 30]], dtype=float)
        det = np.array(
            [[1, 1, 11, 11], [20, 0, 30, 10], [0, 20, 9, 28], [40, 40, 44, 44]], dtype=float
        )
        scores = np.array([0.9, 0.8, 0.7, 0.95])
        dets = [SceneDetections("s", det, scores)]
        gts = [SceneGroundTruth("s", gt)]
        report = eval_coco(dets, gts)
        scenes = [{"boxes": det.tolist(), "scores": scores.tolist(), "gt": gt.tolist()}]
        assert report.metrics["AP@0.50"] == pytest.approx(oracles.coco_ap(scenes, 0.5, 100))
        assert report.metrics["AP@0.75"] == pytest.approx(oracles.coco_ap(scenes, 0.75, 100))

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_random_scenes_match_oracle(self, seed):
        oracle, dets, gts = random_dataset(seed, 6)
        if sum(len(s["gt"]) for s in oracle) == 0:
            pytest.skip("degenerate draw")
        report = eval_coco(dets, gts)
        assert report.metrics["AP@0.50"] == pytest.approx(oracles.coco_ap(oracle, 0.5, 100))
        assert report.metrics["AP@0.75"] == pytest.approx(oracles.coco_ap(oracle, 0.75, 100))
        for m in (1, 10, 100):
            expected = np.mean(
                [oracles.coco_recall(oracle, t, m) for t in report.config["iou_thresholds"]]
            )
            assert report.metrics[f"AR@{m}"] == pytest.approx(expected)

    def test_threshold_and_cap_monotonicity(self):
        _, dets, gts = random_dataset(7, 8)
        report = eval_coco(dets, gts)
        assert report.metrics["AP@0.50"] >= report.metrics["AP@0.75"]
        assert report.metrics["AR@1"] <= report.metrics["AR@10"] <= report.metrics["AR@100"]

    def test_permutation_invariance(self):
        _, dets, gts = random_dataset(11, 5)
        rng = np.random.default_rng(5)
        report_a = eval_coco(dets, gts)
        report_b = eval_coco([shuffled(d, rng) for d in dets], gts)
        assert report_a.metrics == report_b.metrics


class TestEvalMapPr05:
    def perfect(self, n=3):
        rng = np.random.default_rng(3)
        gts, dets = [], []
        for i in range(n):
            boxes = np.asarray([random_box(rng) for _ in range(2)], dtype=float)
            labels = [LABELS[i % 3], LABELS[(i + 1) % 3]]
            gts.append(SceneGroundTruth(f"img{i}", boxes, labels))
            dets.append(SceneDetections(f"img{i}", boxes.copy(), np.ones(2), labels=labels))
        return dets, gts

    def test_perfect_pipeline(self):
        dets, gts = self.perfect()
        report = eval_map_pr_05(dets, gts)
        assert report.metrics["mAP@0.5"] == 1.0
        assert report.metrics["PR@0.5"] == 1.0

    def test_wrong_labels_zero(self):
        dets, gts = self.perfect()
        wrong = [
            SceneDetections(
                d.image_id, d.boxes, d.scores, labels=["wrong"] * len(d.boxes)
            )
            for d in dets
        ]
        report = eval_map_pr_05(wrong, gts)
        assert report.metrics["mAP@0.5"] == 0.0
        assert report.metrics["PR@0.5"] == 0.0

    def test_iou_strictly_greater(self):
        # IoU exactly 0.5 must NOT count
        gt = SceneGroundTruth("s", np.array([[0.0, 0, 10, 10]]), ["p00"])
        det = SceneDetections("s", np.array([[0.0, 0, 10, 5]]), np.array([0.9]), labels=["p00"])
        report = eval_map_pr_05([det], [gt])
        assert report.metrics["PR@0.5"] == 0.0

    def test_two_class_scene_matches_oracle(self):
        gt = np.array([[0, 0, 10, 10], [20, 0, 30, 10], [0, 20, 10, 30], [20, 20, 30, 30]], dtype=float)
        gl = ["p00", "p00", "p01", "p01"]
        det = np.array([[0, 0, 10, 10], [21, 1, 31, 11], [0, 20, 10, 30], [40, 40, 44, 44]], dtype=float)
        dl = ["p00", "p00", "p02", "p01"]
        scores = np.array([0.9, 0.6, 0.8, 0.7])
        dets = [SceneDetections("s", det, scores, labels=dl)]
        gts = [SceneGroundTruth("s", gt, gl)]
        report = eval_map_pr_05(dets, gts)
        scenes = [
            {"boxes": det.tolist(), "scores": scores.tolist(), "labels": dl, "gt": gt.tolist(), "gt_labels": gl}
        ]
        aps = [oracles.labeled_ap_all_point(scenes, c) for c in ("p00", "p01")]
        assert report.metrics["mAP@0.5"] == pytest.approx(np.mean(aps))

    @pytest.mark.parametrize("seed", [4, 5, 6])
    def test_random_scenes_match_oracle(self, seed):
        oracle, dets, gts = random_dataset(seed, 6)
        classes = sorted({l for s in oracle for l in s["gt_labels"]})
        if not classes:
            pytest.skip("degenerate draw")
        report = eval_map_pr_05(dets, gts)
        aps = [oracles.labeled_ap_all_point(oracle, c) for c in classes]
        aps = [a for a in aps if a is not None]
        assert report.metrics["mAP@0.5"] == pytest.approx(np.mean(aps))

    def test_permutation_invariance(self):
        _, dets, gts = random_dataset(12, 5)
        rng = np.random.default_rng(9)
        a = eval_map_pr_05(dets, gts)
        b = eval_map_pr_05([shuffled(d, rng) for d in dets], gts)
        assert a.metrics == b.metrics


class TestEvalCenterF1:
    def test_single_correct_detection(self):
        gt = SceneGroundTruth("s", np.array([[0.0, 0, 10, 10]]), ["p00"])
        det = SceneDetections("s", np.array([[2.0, 2, 8, 8]]), np.array([0.9]), labels=["p00"])
        report = eval_center_f1([det], [gt])
        assert report.counts == {"TP": 1, "FP": 0, "FN": 0, "n_gt": 1}
        assert report.metrics["F1"] == 1.0

    def test_stray_center_is_fp_and_fn(self):
        gt = SceneGroundTruth("s", np.array([[0.0, 0, 10, 10]]), ["p00"])
        det = SceneDetections("s", np.array([[20.0, 20, 30, 30]]), np.array([0.9]), labels=["p00"])
        report = eval_center_f1([det], [gt])
        assert report.counts["FP"] == 1
        assert report.counts["FN"] == 1
        assert report.metrics["F1"] == 0.0

    def test_three_gt_clause_oracle(self):
        # one hit, one wrong label, one miss
        gt = np.array([[0, 0, 10, 10], [20, 0, 30, 10], [0, 20, 10, 30]], dtype=float)
        gl = ["p00", "p01", "p02"]
        det = np.array([[1, 1, 9, 9], [21, 1, 29, 9]], dtype=float)
        dl = ["p00", "p02"]
        scores = np.array([0.9, 0.8])
        report = eval_center_f1(
            [SceneDetections("s", det, scores, labels=dl)],
            [SceneGroundTruth("s", gt, gl)],
        )
        scenes = [{"boxes": det.tolist(), "scores": scores.tolist(), "labels": dl, "gt": gt.tolist(), "gt_labels": gl}]
        assert (report.counts["TP"], report.counts["FP"], report.counts["FN"]) == oracles.center_f1_counts(scenes)
        assert report.counts == {"TP": 1, "FP": 1, "FN": 2, "n_gt": 3}
        assert report.metrics["precision"] == 0.5
        assert report.metrics["recall"] == pytest.approx(1 / 3)

    def test_duplicate_correct_detections(self):
        gt = SceneGroundTruth("s", np.array([[0.0, 0, 10, 10]]), ["p00"])
        det = SceneDetections(
            "s",
            np.array([[1.0, 1, 9, 9], [2.0, 2, 8, 8]]),
            np.array([0.9, 0.8]),
            labels=["p00", "p00"],
        )
        report = eval_center_f1([det], [gt])
        assert report.counts == {"TP": 1, "FP": 1, "FN": 0, "n_gt": 1}

    def test_overlapping_gts_assigned_by_iou(self):
        # detection center inside both gts; higher-IoU gt gets it
        gt = np.array([[0, 0, 10, 10], [4, 4, 20, 20]], dtype=float)
        gl = ["p00", "p01"]
        det = SceneDetections("s", np.array([[4.0, 4, 18, 18]]), np.array([0.9]), labels=["p01"])
        report = eval_center_f1([det], [SceneGroundTruth("s", gt, gl)])
        assert report.counts["TP"] == 1  # matched the larger overlapping gt
        assert report.counts["FN"] == 1

    @pytest.mark.parametrize("seed", [7, 8, 9])
    def test_random_scenes_match_oracle(self, seed):
        oracle, dets, gts = random_dataset(seed, 6)
        report = eval_center_f1(dets, gts)
        tp, fp, fn = oracles.center_f1_counts(oracle)
        assert (report.counts["TP"], report.counts["FP"], report.counts["FN"]) == (tp, fp, fn)

    @pytest.mark.parametrize("seed", [13, 14])
    def test_tp_plus_fn_equals_instances(self, seed):
        _, dets, gts = random_dataset(seed, 8)
        report = eval_center_f1(dets, gts)
        assert report.counts["TP"] + report.counts["FN"] == report.counts["n_gt"]

    def test_permutation_invariance(self):
        _, dets, gts = random_dataset(15, 5)
        rng = np.random.default_rng(2)
        a = eval_center_f1(dets, gts)
        b = eval_center_f1([shuffled(d, rng) for d in dets], gts)
        assert a.counts == b.counts

    def test_undefined_without_gts(self):
        report = eval_center_f1([], [])
        assert report.metrics["F1"] is None


class TestEvalTopkMap:
    def make(self, ranked_builder):
        rng = np.random.default_rng(1)
        dets, gts = [], []
        for i in range(3):
            boxes = np.asarray([random_box(rng) for _ in range(2)], dtype=float)
            labels = [LABELS[i % 3], LABELS[(i + 1) % 3]]
            gts.append(SceneGroundTruth(f"img{i}", boxes, labels))
            ranked = [ranked_builder(l) for l in labels]
            dets.append(
                SceneDetections(
                    f"img{i}", boxes.copy(), np.ones(2), labels=labels, topk_labels=ranked
                )
            )
        return dets, gts

    def test_rank_one_everywhere(self):
        dets, gts = self.make(lambda l: [l] + [x for x in LABELS if x != l])
        report = eval_topk_map(dets, gts, k_values=(1, 2))
        assert report.metrics["mAP"] == 1.0
        assert report.metrics["mAPR"] == 1.0

    def test_never_in_topk(self):
        dets, gts = self.make(lambda l: [x for x in LABELS if x != l][:1])
        report = eval_topk_map(dets, gts, k_values=(1,))
        assert report.metrics["mAP"] == 0.0
        assert report.metrics["mAPR"] == 0.0

    def test_two_image_hand_enumerated(self):
        # image 0: both dets recover their gt at K=2 but only one at K=1
        g0 = SceneGroundTruth("a", np.array([[0.0, 0, 8, 8], [20.0, 0, 28, 8]]), ["p00", "p01"])
        d0 = SceneDetections(
            "a",
            np.array([[0.0, 0, 8, 8], [20.0, 0, 28, 8]]),
            np.array([0.9, 0.8]),
            labels=["p00", "p02"],
            topk_labels=[["p00", "p01"], ["p02", "p01"]],
        )
        # image 1: single det never recovers its gt
        g1 = SceneGroundTruth("b", np.array([[0.0, 0, 8, 8]]), ["p02"])
        d1 = SceneDetections(
            "b",
            np.array([[1.0, 1, 8, 8]]),
            np.array([0.7]),
            labels=["p00"],
            topk_labels=[["p00", "p01"]],
        )
        report = eval_topk_map([d0, d1], [g0, g1], k_values=(1, 2))
        # K=1: image a precision 1/2 recall 1/2; image b 0/0 -> AP 0.25, APR 0.25
        # K=2: image a precision 1/2+... det1 ranked [p00,p01] hits p00; det2 [p02,p01] hits p01
        #      -> precision 1, recall 1; image b still 0 -> AP 0.5, APR 0.5
        assert report.metrics["AP@1"] == pytest.approx(0.25)
        assert report.metrics["APR@1"] == pytest.approx(0.25)
        assert report.metrics["AP@2"] == pytest.approx(0.5)
        assert report.metrics["APR@2"] == pytest.approx(0.5)
        assert report.metrics["mAP"] == pytest.approx(0.375)
        assert report.metrics["mAPR"] == pytest.approx(0.375)

    @pytest.mark.parametrize("seed", [10, 11, 12])
    def test_random_scenes_match_oracle(self, seed):
        oracle, dets, gts = random_dataset(seed, 6, with_ranked=True)
        if sum(len(s["gt"]) for s in oracle) == 0:
            pytest.skip("degenerate draw")
        report = eval_topk_map(dets, gts, k_values=(1, 2, 3))
        for k in (1, 2, 3):
            ap, apr = oracles.topk_pr(oracle, k)
            assert report.metrics[f"AP@{k}"] == pytest.approx(ap)
            assert report.metrics[f"APR@{k}"] == pytest.approx(apr)

    def test_short_ranked_lists_padded(self):
        gt = SceneGroundTruth("s", np.array([[0.0, 0, 8, 8]]), ["p00"])
        det = SceneDetections(
            "s", np.array([[0.0, 0, 8, 8]]), np.array([0.9]), labels=["p01"], topk_labels=[["p01"]]
        )
        report = eval_topk_map([det], [gt], k_values=(20, 50))
        assert report.metrics["mAP"] == 0.0

    def test_undefined_without_gts(self):
        report = eval_topk_map([], [], k_values=(1,))
        assert report.metrics["mAP"] is None


def test_report_serialization():
    _, dets, gts = random_dataset(20, 3)
    report = eval_center_f1(dets, gts)
    text = report.to_text()
    assert "protocol: center-f1" in text
    parsed = __import__("json").loads(report.to_json())
    assert parsed["protocol"] == "center-f1"
    assert set(parsed) == {"protocol", "metrics", "counts", "config"}
