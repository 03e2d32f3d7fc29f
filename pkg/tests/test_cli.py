"""End-to-end command behavior: artifacts, idempotence, exit codes."""

import json
from pathlib import Path

import numpy as np
import pytest

from xraymtl.cli import main
from xraymtl.model import load_params

# a small architecture + tiny budgets so commands finish in seconds
ARCH_OVERRIDES = [
    "--set", "arch.input_size=[16,16]",
    "--set", "arch.encoded_dim=4",
    "--set", "arch.enc_channels=[4,4]",
    "--set", "arch.cls_hidden=6",
    "--set", "arch.det_hidden=8",
    "--set", "arch.seg_channels=[4,4]",
    "--set", "arch.max_gt_boxes=4",
    "--set", "synthetic.image_size=[16,16]",
    "--set", "synthetic.num_samples=24",
    "--set", "eval.n_resamples=50",
]


def _gen(tmp_path, name="data", seed=3):
    out = tmp_path / name
    rc = main(["gen-data", "--out", str(out), "--seed", str(seed), *ARCH_OVERRIDES])
    assert rc == 0
    return out


def _tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


class TestGenData:
    def test_writes_layout(self, tmp_path):
        out = _gen(tmp_path)
        for rel in ("manifest.json", "boxes.csv", "classes.csv", "images", "masks",
                    "effective_config.json"):
            assert (out / rel).exists()

    def test_idempotent_byte_identical(self, tmp_path):
        a = _gen(tmp_path, "a")
        b = _gen(tmp_path, "b")
        ta, tb = _tree_bytes(a), _tree_bytes(b)
        assert list(ta) == list(tb)
        for rel in ta:
            assert ta[rel] == tb[rel], rel

    def test_rerun_from_effective_config_reproduces(self, tmp_path):
        a = _gen(tmp_path, "a")
        cfg_path = a / "effective_config.json"
        out = tmp_path / "c"
        rc = main(["gen-data", "--config", str(cfg_path), "--out", str(out)])
        assert rc == 0
        ta = {k: v for k, v in _tree_bytes(a).items() if k != "effective_config.json"}
        tc = {k: v for k, v in _tree_bytes(out).items() if k != "effective_config.json"}
        assert ta == tc


class TestTrainCommands:
    def test_pretrain_and_mtl_zero_steps_identity(self, tmp_path):
        data = _gen(tmp_path)
        pre = tmp_path / "pre"
        rc = main(["pretrain-cls", "--data", str(data), "--out", str(pre),
                   "--steps", "2", *ARCH_OVERRIDES])
        assert rc == 0
        assert (pre / "checkpoint.ckpt").is_file()
        assert (pre / "phase_report.json").is_file()
        assert (pre / "train_log.jsonl").is_file()

        mtl = tmp_path / "mtl"
        rc = main(["train-mtl", "--det-data", str(data), "--seg-data", str(data),
                   "--init", str(pre / "checkpoint.ckpt"), "--out", str(mtl),
                   "--steps", "0", *ARCH_OVERRIDES])
        assert rc == 0
        a = load_params(pre / "checkpoint.ckpt")
        b = load_params(mtl / "checkpoint.ckpt")
        for key, arr in a.flat().items():
            assert np.array_equal(arr, b.flat()[key])

    def test_evaluate_untrained_checkpoint(self, tmp_path):
        data = _gen(tmp_path)
        pre = tmp_path / "pre"
        main(["pretrain-cls", "--data", str(data), "--out", str(pre), "--steps", "0",
              *ARCH_OVERRIDES])
        ev = tmp_path / "ev"
        rc = main(["evaluate", "--checkpoint", str(pre / "checkpoint.ckpt"),
                   "--data", str(data), "--out", str(ev), *ARCH_OVERRIDES])
        assert rc == 0
        report = json.loads((ev / "eval_report.json").read_text())
        assert set(report["metrics"]) >= {"accuracy", "f1", "dice", "map"}
        for mv in report["metrics"].values():
            assert 0.0 <= mv["estimate"] <= 1.0

    def test_render_writes_overlays(self, tmp_path):
        data = _gen(tmp_path)
        pre = tmp_path / "pre"
        main(["pretrain-cls", "--data", str(data), "--out", str(pre), "--steps", "0",
              *ARCH_OVERRIDES])
        out = tmp_path / "ov"
        rc = main(["render", "--checkpoint", str(pre / "checkpoint.ckpt"),
                   "--data", str(data), "--out", str(out), "--limit", "4",
                   *ARCH_OVERRIDES])
        assert rc == 0
        assert len(list(out.glob("*_overlay.png"))) == 4
        assert (out / "diagnoses.jsonl").is_file()

    def test_finetune_emits_before_after_reports(self, tmp_path):
        data = _gen(tmp_path)
        pre = tmp_path / "pre"
        main(["pretrain-cls", "--data", str(data), "--out", str(pre), "--steps", "2",
              *ARCH_OVERRIDES])
        ft = tmp_path / "ft"
        rc = main(["finetune", "--data", str(data), "--init", str(pre / "checkpoint.ckpt"),
                   "--out", str(ft), "--steps", "2", *ARCH_OVERRIDES])
        assert rc == 0
        assert (ft / "eval_before.json").is_file()
        assert (ft / "eval_after.json").is_file()
        assert (ft / "checkpoint.ckpt").is_file()


class TestExitCodes:
    def test_bad_config_json_is_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["gen-data", "--out", str(tmp_path / "x"), "--config", str(bad)]) == 2

    def test_bad_override_is_2(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "x"), "--set", "nonsense"]) == 2

    def test_missing_dataset_is_3(self, tmp_path):
        rc = main(["pretrain-cls", "--data", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "o"), *ARCH_OVERRIDES])
        assert rc == 3

    def test_divergence_is_4(self, tmp_path):
        # finite params whose detection outputs overflow the L2 loss
        from xraymtl.model import init_params, save_params
        from conftest import TINY_ARCH
        data = _gen(tmp_path)
        params = init_params(TINY_ARCH, seed=0)
        params.det["out_b"][:] = 1e200
        ckpt = tmp_path / "poisoned.ckpt"
        save_params(params, ckpt)
        rc = main(["pretrain-det", "--data", str(data), "--init", str(ckpt),
                   "--out", str(tmp_path / "o"), "--steps", "2", "--cls-steps", "0",
                   *ARCH_OVERRIDES])
        assert rc == 4
