"""Shape contracts, determinism and checkpoint round trips."""

import numpy as np
import pytest

from xraymtl.data import ImageBatch
from xraymtl.errors import CheckpointError, ConfigError
from xraymtl.model import (ArchConfig, EncodedFeatures, classify, detect,
                           encode, init_params, load_params, save_params,
                           segment)

from conftest import make_dataset


def _batch(arch, n=2, seed=0):
    ds = make_dataset(image_size=arch.input_size, n=n, seed=seed)
    return ImageBatch(ds.images, ds.ids)


class TestArchConfig:
    def test_unreachable_encoded_dim_rejected(self):
        with pytest.raises(ConfigError, match="not reachable"):
            ArchConfig(input_size=(16, 16), encoded_dim=5, enc_channels=(4, 4),
                       seg_channels=(4, 4)).validate()

    def test_non_square_rejected(self):
        with pytest.raises(ConfigError, match="square"):
            ArchConfig(input_size=(16, 32)).validate()

    def test_seg_depth_must_match(self):
        with pytest.raises(ConfigError, match="seg_channels"):
            ArchConfig(input_size=(16, 16), encoded_dim=4, enc_channels=(4, 4),
                       seg_channels=(4,)).validate()

    def test_anchor_count_is_grid_size(self, tiny_arch):
        assert tiny_arch.anchors_per_image == 16
        assert tiny_arch.anchors().shape == (16, 4)


class TestInit:
    def test_deterministic(self, tiny_arch):
        a = init_params(tiny_arch, seed=3)
        b = init_params(tiny_arch, seed=3)
        for key, arr in a.flat().items():
            assert np.array_equal(arr, b.flat()[key])

    def test_different_seeds_differ(self, tiny_arch):
        a = init_params(tiny_arch, seed=3)
        b = init_params(tiny_arch, seed=4)
        assert any(not np.array_equal(arr, b.flat()[key]) for key, arr in a.flat().items())

    def test_groups_are_disjoint_and_finite(self, tiny_params):
        keys = list(tiny_params.flat())
        assert len(keys) == len(set(keys))
        assert tiny_params.all_finite()

    def test_unit_normal_scheme(self, tiny_arch):
        p = init_params(tiny_arch, seed=0, scheme="unit_normal")
        # fan-in scaled init would give conv1 weights std ~ sqrt(2/36) = 0.24
        assert np.std(p.enc["conv1_w"]) > 0.7


class TestShapes:
    def test_encoder_shape_contract(self):
        # M=2, N=8, d=4
        arch = ArchConfig(input_size=(16, 16), encoded_dim=4, enc_channels=(4, 8),
                          cls_hidden=6, det_hidden=8, seg_channels=(4, 4))
        params = init_params(arch, seed=0)
        enc = encode(params, _batch(arch))
        assert enc.features.shape == (2, 8, 4, 4)

    @pytest.mark.parametrize("size,channels,d", [
        (16, (4, 4), 4), (32, (4, 8, 8), 4), (64, (4, 4, 8), 8)])
    def test_head_shapes_across_config_family(self, size, channels, d):
        arch = ArchConfig(input_size=(size, size), encoded_dim=d, enc_channels=channels,
                          cls_hidden=5, det_hidden=6, seg_channels=tuple([4] * len(channels)),
                          num_classes=3)
        params = init_params(arch, seed=1)
        batch = _batch(arch, n=2)
        enc = encode(params, batch)
        probs = classify(params, enc)
        assert probs.shape == (2, 3)
        assert np.all((probs > 0) & (probs < 1))
        boxes = detect(params, enc)
        assert boxes.shape == (2, d * d, 4)
        assert np.all(boxes >= 0)
        masks = segment(params, enc)
        assert masks.shape == (2, size, size)
        assert np.all((masks > 0) & (masks < 1))

    def test_input_shape_mismatch_rejected(self, tiny_params):
        bad = ImageBatch(np.zeros((1, 8, 8)), ["x"])
        with pytest.raises(ValueError, match="does not match"):
            encode(tiny_params, bad)

    def test_feature_shape_mismatch_rejected(self, tiny_params):
        with pytest.raises(ValueError, match="does not match"):
            classify(tiny_params, EncodedFeatures(np.zeros((1, 3, 4, 4))))


class TestDeterminismAndIndependence:
    def test_encode_deterministic(self, tiny_params, tiny_arch):
        batch = _batch(tiny_arch, n=3)
        a = encode(tiny_params, batch).features
        b = encode(tiny_params, batch).features
        assert np.array_equal(a, b)

    def test_duplicated_row_duplicates_output(self, tiny_params, tiny_arch):
        batch = _batch(tiny_arch, n=2)
        doubled = ImageBatch(np.concatenate([batch.pixels, batch.pixels[:1]]),
                             batch.ids + ["dup"])
        out = encode(tiny_params, doubled).features
        assert np.array_equal(out[0], out[2])

    def test_row_permutation_permutes_outputs(self, tiny_params, tiny_arch):
        batch = _batch(tiny_arch, n=3)
        enc = encode(tiny_params, batch)
        probs = classify(tiny_params, enc)
        perm = [2, 0, 1]
        batch_p = ImageBatch(batch.pixels[perm], [batch.ids[i] for i in perm])
        probs_p = classify(tiny_params, encode(tiny_params, batch_p))
        assert np.array_equal(probs_p, probs[perm])

    def test_anchor_slots_are_input_independent(self, tiny_params, tiny_arch):
        # predictions live on a fixed grid: zero inputs and real inputs
        # produce (K, 4) readouts aligned to the same anchor layout
        anchors = tiny_arch.anchors()
        assert anchors[0][0] < anchors[1][0]  # slot order scans columns first
        assert np.array_equal(anchors[0][2:], anchors[5][2:])

    def test_bounded_response_to_small_perturbation(self, tiny_params, tiny_arch):
        batch = _batch(tiny_arch, n=1)
        base = encode(tiny_params, batch).features
        bumped = batch.pixels.copy()
        bumped[0, 8, 8] += 1e-3
        out = encode(tiny_params, ImageBatch(bumped, batch.ids)).features
        # L-infinity operator bound: product over layers of max-row L1 norms
        bound = 1.0
        for i in range(tiny_arch.depth):
            w = tiny_params.enc[f"conv{i}_w"]
            bound *= np.abs(w).sum(axis=(1, 2, 3)).max()
        assert np.max(np.abs(out - base)) <= bound * 1e-3 + 1e-12


class TestCheckpoints:
    def test_round_trip_bitwise(self, tiny_params, tmp_path):
        path = tmp_path / "p.ckpt"
        save_params(tiny_params, path)
        loaded = load_params(path)
        assert loaded.arch == tiny_params.arch
        for key, arr in tiny_params.flat().items():
            assert np.array_equal(arr, loaded.flat()[key])

    def test_truncated_file_rejected(self, tiny_params, tmp_path):
        path = tmp_path / "p.ckpt"
        save_params(tiny_params, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            load_params(path)

    def test_garbage_file_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"12345")
        with pytest.raises(CheckpointError):
            load_params(path)

    def test_arch_mismatch_names_field(self, tiny_params, tiny_arch, tmp_path):
        from dataclasses import replace
        path = tmp_path / "p.ckpt"
        save_params(tiny_params, path)
        with pytest.raises(CheckpointError, match="num_classes"):
            load_params(path, expect_arch=replace(tiny_arch, num_classes=7))
