"""Command-line surface.

Subcommands: gen-synthetic, train-detector, train-embedder, build-gallery,
detect, recognize, evaluate. Exit codes: 0 success, 1 usage error,
2 data/weights error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .archive import ArchiveError
from .data import load_annotations, load_image, load_query_db, load_split, save_image
from .embedder import PatchEmbedder
from .evaluation import (
    SceneGroundTruth,
    eval_center_f1,
    eval_coco,
    eval_map_pr_05,
    eval_topk_map,
)
from .gallery import build_gallery, save_index
from .localizer import ProductLocalizer
from .pipeline import (
    Detection,
    GalleryFingerprintError,
    Pipeline,
    detections_to_record,
    parse_config_file,
    record_to_eval,
    render_annotations,
)
from .synthetic import SceneSpec, gen_synthetic_dataset


class UsageError(RuntimeError):
    pass


class DataError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="pipeline config file")
    common.add_argument("--seed", type=int, default=0, help="random seed")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")

    parser = _Parser(prog="shelfvision", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", parents=[common], help="generate the synthetic shelf dataset")
    p.add_argument("--scenes", type=int, default=250)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--rows", type=int, default=3)
    p.add_argument("--cols", type=int, default=3)
    p.add_argument("--cell-size", type=int, default=48)
    p.add_argument("--blank-prob", type=float, default=0.25)
    p.add_argument("--split", type=_float_list, default=[0.8, 0.1, 0.1])
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train-detector", parents=[common], help="train the product localizer")
    p.add_argument("--data", type=Path, required=True, help="training split directory")
    p.add_argument("--phase1-epochs", type=int, default=25)
    p.add_argument("--phase2-epochs", type=int, default=15)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--train-proposals", type=int, default=1000)
    p.add_argument("--pyramid-depth", type=int, default=64)
    p.add_argument("--rpn-channels", type=int, default=64)
    p.add_argument("--widths", type=_int_list, default=[16, 32, 64, 128, 256])
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("train-embedder", parents=[common], help="train the patch embedder")
    p.add_argument("--query", type=Path, required=True, help="query-image db directory")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--batches-per-epoch", type=int, default=None)
    p.add_argument("--input-size", type=int, default=64)
    p.add_argument("--widths", type=_int_list, default=[16, 32, 64, 128, 256])
    p.set_defaults(func=cmd_train_embedder)

    p = sub.add_parser("build-gallery", parents=[common], help="build the gallery index")
    p.add_argument("--query", type=Path, required=True)
    p.add_argument("--embedder", type=Path, required=True)
    p.add_argument("--n-aug", type=int, default=8)
    p.set_defaults(func=cmd_build_gallery)

    p = sub.add_parser("detect", parents=[common], help="class-agnostic detection on one image")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--detector", type=Path, required=True)
    p.add_argument("--max-dets", type=int, default=100)
    p.add_argument("--score-threshold", type=float, default=0.05)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("recognize", parents=[common], help="end-to-end detection + recognition")
    p.add_argument("--image", type=Path, help="single rack image")
    p.add_argument("--data", type=Path, help="dataset split directory (batch mode)")
    p.add_argument("--allow-stale-gallery", action="store_true")
    p.set_defaults(func=cmd_recognize)

    p = sub.add_parser("evaluate", parents=[common], help="run one evaluation protocol")
    p.add_argument("protocol", choices=["coco", "map05", "center-f1", "topk"])
    p.add_argument("--dets", type=Path, required=True, help="detections JSONL")
    p.add_argument("--gts", type=Path, required=True, help="ground-truth annotations JSONL")
    p.add_argument("--k", type=_int_list, default=[20, 50], help="K list for the topk protocol")
    p.add_argument("--max-dets", type=_int_list, default=[1, 10, 100], help="maxDets for coco")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _require_file(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise DataError(f"{what} not found: {path}")
    return Path(path)


def _write_log(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def _write_detections(path: Path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def cmd_gen_synthetic(args) -> int:
    spec = SceneSpec(
        n_classes=args.classes,
        rows=args.rows,
        cols=args.cols,
        cell_size=args.cell_size,
        blank_prob=args.blank_prob,
        seed=args.seed,
    )
    paths = gen_synthetic_dataset(spec, args.scenes, tuple(args.split), args.out)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_train_detector(args) -> int:
    scenes = load_split(_require_file(args.data, "training split"))
    localizer = ProductLocalizer(
        backbone_widths=tuple(args.widths),
        pyramid_depth=args.pyramid_depth,
        rpn_channels=args.rpn_channels,
        batch_size=args.batch_size,
        phase1_epochs=args.phase1_epochs,
        phase2_epochs=args.phase2_epochs,
        train_proposals=args.train_proposals,
        random_state=args.seed,
    )
    localizer.fit([s.image for s in scenes], [s.boxes for s in scenes])
    args.out.mkdir(parents=True, exist_ok=True)
    out = args.out / "detector.weights"
    localizer.save(out)
    _write_log(args.out / "detector_log.csv", localizer.train_log_)
    print(f"detector: {out}")
    return 0


def cmd_train_embedder(args) -> int:
    products = load_query_db(_require_file(args.query, "query db"))
    embedder = PatchEmbedder(
        widths=tuple(args.widths),
        input_size=args.input_size,
        margin=args.margin,
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        batches_per_epoch=args.batches_per_epoch,
        random_state=args.seed,
    )
    embedder.fit([img for _, img in products], [label for label, _ in products])
    args.out.mkdir(parents=True, exist_ok=True)
    out = args.out / "embedder.weights"
    embedder.save(out)
    _write_log(args.out / "embedder_log.csv", embedder.train_log_)
    print(f"embedder: {out}")
    return 0


def cmd_build_gallery(args) -> int:
    products = load_query_db(_require_file(args.query, "query db"))
    embedder = PatchEmbedder.load(_require_file(args.embedder, "embedder weights"))
    index = build_gallery(products, embedder, n_aug=args.n_aug, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    out = args.out / "gallery.index"
    save_index(index, out)
    print(f"gallery: {out} ({len(index)} entries)")
    return 0


def cmd_detect(args) -> int:
    localizer = ProductLocalizer.load(
        _require_file(args.detector, "detector weights"),
        score_threshold=args.score_threshold,
    )
    image = load_image(_require_file(args.image, "image"))
    boxes, scores = localizer.detect(image, max_dets=args.max_dets)
    args.out.mkdir(parents=True, exist_ok=True)
    dets = [Detection(tuple(b.tolist()), float(s)) for b, s in zip(boxes, scores)]
    _write_detections(
        args.out / "detections.jsonl", [detections_to_record(args.image.name, dets)]
    )
    save_image(args.out / "annotated.png", render_annotations(image, dets))
    print(f"{len(dets)} detections -> {args.out}")
    return 0


def cmd_recognize(args) -> int:
    if (args.image is None) == (args.data is None):
        raise UsageError("recognize needs exactly one of --image or --data")
    if args.config is None:
        raise UsageError("recognize needs --config")
    config = parse_config_file(_require_file(args.config, "config"))
    if args.allow_stale_gallery:
        config.allow_stale_gallery = True
    pipeline = Pipeline.from_config(config)

    if args.image is not None:
        ids_images = [(args.image.name, load_image(_require_file(args.image, "image")))]
    else:
        scenes = load_split(_require_file(args.data, "dataset split"))
        ids_images = [(s.image_id, s.image) for s in scenes]

    args.out.mkdir(parents=True, exist_ok=True)
    records = []
    for image_id, image in ids_images:
        dets = pipeline.run(image)
        records.append(detections_to_record(image_id, dets))
        stem = Path(image_id).stem
        save_image(args.out / f"annotated_{stem}.png", render_annotations(image, dets))
    _write_detections(args.out / "detections.jsonl", records)
    print(f"{len(records)} images -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    det_records = load_annotations(_require_file(args.dets, "detections file"))
    gt_records = load_annotations(_require_file(args.gts, "ground-truth file"))
    detections = [record_to_eval(rec) for rec in det_records]
    ground_truth = [
        SceneGroundTruth(
            rec["image"],
            np.asarray(rec.get("boxes", []), dtype=np.float64).reshape(-1, 4),
            rec.get("labels"),
        )
        for rec in gt_records
    ]
    if args.protocol == "coco":
        report = eval_coco(detections, ground_truth, max_dets_list=tuple(args.max_dets))
    elif args.protocol == "map05":
        report = eval_map_pr_05(detections, ground_truth)
    elif args.protocol == "center-f1":
        report = eval_center_f1(detections, ground_truth)
    else:
        report = eval_topk_map(detections, ground_truth, k_values=tuple(args.k))
    print(report.to_text())
    args.out.mkdir(parents=True, exist_ok=True)
    out = args.out / f"report_{args.protocol}.json"
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    print(f"report: {out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, ArchiveError, GalleryFingerprintError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry_point() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry_point()
