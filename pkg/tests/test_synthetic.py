import hashlib
from pathlib import Path

import numpy as np
import pytest

from shelfvision.data import load_query_db, load_split
from shelfvision.geometry import check_boxes, iou
from shelfvision.synthetic import (
    SceneSpec,
    class_style,
    gen_synthetic_dataset,
    render_glyph,
    render_query_image,
    render_scene,
    split_counts,
)


def dir_digest(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()


class TestSpec:
    def test_canvas_dims_divisible_by_32(self):
        for rows, cols, cell in [(3, 3, 48), (2, 5, 40), (4, 4, 48), (1, 1, 32)]:
            h, w, oy, ox = SceneSpec(rows=rows, cols=cols, cell_size=cell).canvas_size()
            assert h % 32 == 0 and w % 32 == 0
            assert oy >= 0 and ox >= 0

    def test_validation(self):
        with pytest.raises(ValueError):
            SceneSpec(n_classes=1)
        with pytest.raises(ValueError):
            SceneSpec(blank_prob=1.5)

    def test_labels(self):
        assert SceneSpec(n_classes=3).labels == ["p00", "p01", "p02"]


class TestGlyphs:
    def test_near_duplicate_pair_shares_shape_and_hue(self):
        a = class_style(6, 8)
        b = class_style(7, 8)
        assert a["shape"] == b["shape"]
        assert a["code"] != b["code"]
        assert a["fill"] != b["fill"]  # shade differs, hue shared

    def test_distinct_codes(self):
        styles = [class_style(i, 8) for i in range(8)]
        assert len({s["code"] for s in styles}) == 8

    def test_glyph_alpha_extent(self):
        glyph = render_glyph(0, 8, 40)
        assert glyph.shape == (40, 40, 4)
        assert glyph[..., 3].max() == 255
        assert glyph[0, 0, 3] == 0  # corners stay transparent

    def test_query_image_clean_and_sized(self):
        img = render_query_image(2, 8, size=64)
        assert img.shape == (64, 64, 3)
        assert img.dtype == np.uint8

    def test_glyph_rendering_deterministic(self):
        assert np.array_equal(render_glyph(3, 8, 36), render_glyph(3, 8, 36))


class TestRenderScene:
    def test_boxes_valid_and_inside_canvas(self):
        spec = SceneSpec(seed=4)
        img, boxes, labels = render_scene(spec, np.random.default_rng(4))
        h, w, _, _ = spec.canvas_size()
        assert img.shape == (h, w, 3)
        if len(boxes):
            check_boxes(boxes)
            assert boxes[:, 0].min() >= 0 and boxes[:, 1].min() >= 0
            assert boxes[:, 2].max() <= w and boxes[:, 3].max() <= h
        assert all(l in spec.labels for l in labels)

    def test_annotation_equals_mask_bbox_exactly(self):
        spec = SceneSpec(seed=0)
        img, boxes, labels, masks = render_scene(
            spec, np.random.default_rng(0), return_masks=True
        )
        assert len(masks) == len(boxes)
        for box, mask in zip(boxes, masks):
            ys, xs = np.nonzero(mask)
            mask_box = [xs.min(), ys.min(), xs.max() + 1, ys.max() + 1]
            assert iou(box, mask_box) == 1.0

    def test_crop_contains_whole_glyph(self):
        spec = SceneSpec(seed=1)
        img, boxes, labels, masks = render_scene(
            spec, np.random.default_rng(1), return_masks=True
        )
        for box, mask in zip(boxes, masks):
            x1, y1, x2, y2 = (int(v) for v in box)
            outside = mask.copy()
            outside[y1:y2, x1:x2] = False
            assert not outside.any()

    def test_blank_probability_one_gives_empty_scene(self):
        spec = SceneSpec(blank_prob=1.0, seed=2)
        _, boxes, labels = render_scene(spec, np.random.default_rng(2))
        assert len(boxes) == 0 and labels == []

    def test_deterministic_given_rng_seed(self):
        spec = SceneSpec(seed=3)
        a = render_scene(spec, np.random.default_rng(9))
        b = render_scene(spec, np.random.default_rng(9))
        assert np.array_equal(a[0], b[0])
        assert np.array_equal(a[1], b[1])


class TestSplits:
    def test_ten_scene_split(self):
        assert split_counts(10, (0.8, 0.1, 0.1)) == [8, 1, 1]

    def test_counts_always_sum(self):
        for n in (1, 7, 23, 100):
            assert sum(split_counts(n, (0.8, 0.1, 0.1))) == n

    def test_bad_fractions_rejected(self):
        with pytest.raises(ValueError, match="sum to 1"):
            split_counts(10, (0.5, 0.2))


class TestGenerateDataset:
    def test_layout_and_counts(self, tmp_path):
        spec = SceneSpec(n_classes=4, rows=2, cols=2, seed=5)
        paths = gen_synthetic_dataset(spec, 10, (0.8, 0.1, 0.1), tmp_path)
        train = load_split(paths["train"])
        assert len(train) == 8
        assert len(load_split(paths["val"])) == 1
        assert len(load_split(paths["test"])) == 1
        products = load_query_db(paths["query"])
        assert [label for label, _ in products] == spec.labels
        for scene in train:
            assert scene.image.dtype == np.uint8
            assert len(scene.labels) == len(scene.boxes)

    def test_byte_identical_regeneration(self, tmp_path):
        spec = SceneSpec(n_classes=3, rows=2, cols=2, seed=6)
        gen_synthetic_dataset(spec, 6, (0.5, 0.5, 0.0), tmp_path / "a")
        gen_synthetic_dataset(spec, 6, (0.5, 0.5, 0.0), tmp_path / "b")
        assert dir_digest(tmp_path / "a") == dir_digest(tmp_path / "b")

    def test_seed_changes_content(self, tmp_path):
        gen_synthetic_dataset(SceneSpec(n_classes=3, seed=1), 3, (1.0, 0.0, 0.0), tmp_path / "a")
        gen_synthetic_dataset(SceneSpec(n_classes=3, seed=2), 3, (1.0, 0.0, 0.0), tmp_path / "b")
        assert dir_digest(tmp_path / "a") != dir_digest(tmp_path / "b")
