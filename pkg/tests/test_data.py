"""Synthetic generator, box geometry and dataset I/O."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xraymtl.data import (Box, SyntheticConfig, box_from_mask,
                          derive_classification_labels, generate_synthetic,
                          iou_matrix, load_dataset, rasterize_boxes, save_dataset)
from xraymtl.errors import ConfigError, DataError

from oracles import cc_boxes_loop


def _cfg(**kw):
    base = dict(image_size=(32, 32), num_samples=20, positive_fraction=0.5, seed=1)
    base.update(kw)
    return SyntheticConfig(**base)


class TestGenerator:
    def test_all_negative_when_fraction_zero(self):
        ds = generate_synthetic(_cfg(positive_fraction=0.0))
        for b in ds.bundles:
            assert b.cls.tolist() == [0.0]
            assert b.boxes == []
            assert not b.mask.any()

    def test_all_positive_single_blob(self):
        ds = generate_synthetic(_cfg(positive_fraction=1.0, blob_count_range=(1, 1)))
        for b in ds.bundles:
            assert b.cls.tolist() == [1.0]
            assert len(b.boxes) == 1
            assert b.mask.sum() > 0

    def test_positive_count_within_binomial_band(self):
        # n=1000, p=0.3: 3-sigma band is 300 +/- 3*sqrt(1000*0.3*0.7) = [256.5, 343.5]
        ds = generate_synthetic(_cfg(num_samples=1000, positive_fraction=0.3, seed=7))
        count = sum(1 for b in ds.bundles if b.cls[0] == 1.0)
        assert 257 <= count <= 343

    def test_deterministic_for_seed(self):
        a = generate_synthetic(_cfg(seed=5))
        b = generate_synthetic(_cfg(seed=5))
        assert np.array_equal(a.images, b.images)
        for ba, bb in zip(a.bundles, b.bundles):
            assert np.array_equal(ba.mask, bb.mask)
            assert ba.boxes == bb.boxes
        c = generate_synthetic(_cfg(seed=6))
        assert not np.array_equal(a.images, c.images)

    def test_mask_pixels_inside_box_union(self):
        ds = generate_synthetic(_cfg(positive_fraction=1.0, num_samples=30, seed=3))
        h, w = ds.image_size
        for b in ds.bundles:
            union = rasterize_boxes(b.boxes, (h, w))
            assert not np.any(b.mask & ~union)

    def test_pixels_in_unit_range(self):
        ds = generate_synthetic(_cfg(noise_std=0.3, seed=2))
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_rejects_bad_configs(self):
        with pytest.raises(ConfigError):
            generate_synthetic(_cfg(num_samples=0))
        with pytest.raises(ConfigError):
            generate_synthetic(_cfg(image_size=(2, 2)))
        with pytest.raises(ConfigError):
            generate_synthetic(_cfg(positive_fraction=1.5))

    def test_inverted_contrast_flips_levels(self):
        bright = generate_synthetic(_cfg(positive_fraction=1.0, seed=9))
        dark = generate_synthetic(_cfg(positive_fraction=1.0, seed=9, invert_contrast=True))
        bm = bright.bundles[0].mask.astype(bool)
        assert bright.images[0][bm].mean() > bright.images[0][~bm].mean()
        dm = dark.bundles[0].mask.astype(bool)
        assert dark.images[0][dm].mean() < dark.images[0][~dm].mean()


class TestBoxFromMask:
    def test_empty_mask(self):
        assert box_from_mask(np.zeros((10, 10))) == []

    def test_known_rectangle(self):
        # rows 20..39, cols 10..19 on a 100x100 grid
        mask = np.zeros((100, 100), dtype=np.uint8)
        mask[20:40, 10:20] = 1
        (box,) = box_from_mask(mask)
        assert abs(box.c_x - 0.145) < 1e-12
        assert abs(box.c_y - 0.295) < 1e-12
        assert abs(box.l - 0.20) < 1e-12
        assert abs(box.w - 0.10) < 1e-12

    def test_two_blobs_against_flood_fill(self):
        mask = np.zeros((40, 40), dtype=np.uint8)
        mask[4:10, 5:12] = 1
        mask[22:30, 20:33] = 1
        got = sorted(box_from_mask(mask), key=lambda b: (b.c_y, b.c_x))
        want = sorted(cc_boxes_loop(mask), key=lambda b: (b.c_y, b.c_x))
        assert got == want

    def test_random_masks_against_flood_fill(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            mask = (rng.random((24, 24)) < 0.35).astype(np.uint8)
            got = sorted(box_from_mask(mask), key=lambda b: (b.c_y, b.c_x, b.l, b.w))
            want = sorted(cc_boxes_loop(mask), key=lambda b: (b.c_y, b.c_x, b.l, b.w))
            assert got == want

    @given(st.data())
    @settings(max_examples=40, deadline=None)
    def test_rasterize_roundtrip_on_disjoint_rectangles(self, data):
        h = w = 32
        n = data.draw(st.integers(1, 3))
        rects, mask = [], np.zeros((h, w), dtype=np.uint8)
        for _ in range(n):
            r0 = data.draw(st.integers(0, h - 3))
            r1 = data.draw(st.integers(r0, min(r0 + 8, h - 1)))
            c0 = data.draw(st.integers(0, w - 3))
            c1 = data.draw(st.integers(c0, min(c0 + 8, w - 1)))
            # reject overlap/adjacency; 4-connectivity merges touching rects
            grown = mask[max(r0 - 1, 0):r1 + 2, max(c0 - 1, 0):c1 + 2]
            if grown.any():
                continue
            mask[r0:r1 + 1, c0:c1 + 1] = 1
            rects.append((r0, r1, c0, c1))
        boxes = box_from_mask(mask)
        assert len(boxes) == len(rects)
        again = rasterize_boxes(boxes, (h, w))
        assert np.array_equal(again, mask)


class TestIoU:
    def test_self_iou_is_one(self):
        b = Box(0.4, 0.6, 0.2, 0.3)
        assert iou_matrix(b.as_array(), b.as_array())[0, 0] == pytest.approx(1.0)

    def test_disjoint_iou_is_zero(self):
        a = Box(0.2, 0.2, 0.1, 0.1)
        b = Box(0.8, 0.8, 0.1, 0.1)
        assert iou_matrix(a.as_array(), b.as_array())[0, 0] == 0.0

    def test_analytic_matches_rasterized_for_pixel_aligned_boxes(self):
        rng = np.random.default_rng(4)
        size = 64
        for _ in range(25):
            mask = np.zeros((size, size), dtype=np.uint8)
            r0, c0 = rng.integers(0, 40, 2)
            hgt, wid = rng.integers(4, 20, 2)
            mask[r0:r0 + hgt, c0:c0 + wid] = 1
            (a,) = box_from_mask(mask)
            mask2 = np.zeros((size, size), dtype=np.uint8)
            r0b, c0b = rng.integers(0, 40, 2)
            hb, wb = rng.integers(4, 20, 2)
            mask2[r0b:r0b + hb, c0b:c0b + wb] = 1
            (b,) = box_from_mask(mask2)
            inter = int(np.sum(mask & mask2))
            union = int(np.sum(mask | mask2))
            pixel_iou = inter / union
            analytic = iou_matrix(a.as_array(), b.as_array())[0, 0]
            assert abs(analytic - pixel_iou) <= 2.0 / (size * size)


class TestDerivedLabels:
    def test_examples(self, small_dataset):
        derived = derive_classification_labels(small_dataset, source="det")
        assert derived.task_coverage == frozenset({"cls"})
        assert len(derived) == len(small_dataset)
        assert derived.ids == small_dataset.ids
        for src, out in zip(small_dataset.bundles, derived.bundles):
            assert out.cls[0] == (1.0 if len(src.boxes) > 0 else 0.0)

    def test_count_matches_direct_oracle(self, small_dataset):
        derived = derive_classification_labels(small_dataset, source="seg")
        got = sum(int(b.cls[0]) for b in derived.bundles)
        want = sum(1 for b in small_dataset.bundles if b.mask.any())
        assert got == want

    def test_rejects_dataset_without_sources(self, small_dataset):
        cls_only = derive_classification_labels(small_dataset)
        with pytest.raises(DataError):
            derive_classification_labels(cls_only)


class TestOnDiskLayout:
    def test_round_trip_bundles_identical(self, tmp_path, small_dataset):
        save_dataset(small_dataset, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds")
        assert loaded.task_coverage == small_dataset.task_coverage
        assert loaded.ids == small_dataset.ids
        for a, b in zip(small_dataset.bundles, loaded.bundles):
            assert np.array_equal(a.cls, b.cls)
            assert a.boxes == b.boxes
            assert np.array_equal(a.mask, b.mask)
        # images only quantized to 8 bits
        assert np.max(np.abs(loaded.images - small_dataset.images)) <= 0.5 / 255 + 1e-12

    def test_coverage_inference_without_masks(self, tmp_path, small_dataset):
        root = tmp_path / "ds"
        save_dataset(small_dataset, root)
        import json
        manifest = json.loads((root / "manifest.json").read_text())
        manifest["annotations"] = ["boxes"]
        (root / "manifest.json").write_text(json.dumps(manifest))
        loaded = load_dataset(root)
        assert loaded.task_coverage == frozenset({"cls", "det"})

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError, match="manifest"):
            load_dataset(tmp_path)

    def test_box_out_of_range_rejected(self, tmp_path, small_dataset):
        root = tmp_path / "ds"
        save_dataset(small_dataset, root)
        rows = (root / "boxes.csv").read_text().splitlines()
        rows.append(f"{small_dataset.ids[0]},1.4,0.5,0.2,0.2")
        (root / "boxes.csv").write_text("\n".join(rows) + "\n")
        with pytest.raises(DataError, match="outside"):
            load_dataset(root)

    def test_non_binary_mask_rejected(self, tmp_path, small_dataset):
        from PIL import Image
        root = tmp_path / "ds"
        save_dataset(small_dataset, root)
        sid = small_dataset.ids[0]
        Image.fromarray(np.full((32, 32), 97, dtype=np.uint8), mode="L").save(
            root / "masks" / f"{sid}.png")
        with pytest.raises(DataError, match="binary"):
            load_dataset(root)

    def test_unreadable_image_rejected(self, tmp_path, small_dataset):
        root = tmp_path / "ds"
        save_dataset(small_dataset, root)
        (root / "images" / f"{small_dataset.ids[0]}.png").write_bytes(b"not a png")
        with pytest.raises(DataError, match="unreadable"):
            load_dataset(root)

    def test_empty_box_row_tolerated(self, tmp_path, small_dataset):
        root = tmp_path / "ds"
        save_dataset(small_dataset, root)
        neg = next(sid for sid, b in zip(small_dataset.ids, small_dataset.bundles)
                   if len(b.boxes) == 0)
        with open(root / "boxes.csv", "a") as f:
            f.write(f"{neg},,,,\n")
        loaded = load_dataset(root)
        assert loaded.bundles[loaded.ids.index(neg)].boxes == []
