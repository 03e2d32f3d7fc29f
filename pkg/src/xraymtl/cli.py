"""Command-line entry point.

Subcommands: gen-data, pretrain-cls, pretrain-det, pretrain-seg,
train-mtl, finetune, evaluate, render, run-protocol. Every command
reads one JSON config (all defaults apply when omitted), accepts
--set section.key=value overrides, and writes the effective config
next to its outputs so the run can be reproduced exactly.

Exit codes: 0 success, 2 config error, 3 data error, 4 training
divergence (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as _config
from . import data as _data
from . import metrics as _metrics
from . import model as _model
from . import pipeline as _pipeline
from . import train as _train
from .errors import CheckpointError, ConfigError, DataError, TrainingDiverged
from .transfer import finetune_new_disease, reinit_decision_layer


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override a config entry")


def _load_cfg(args) -> _config.RunConfig:
    return _config.load_config(args.config, args.overrides)


def _load_dataset_checked(path, arch: _model.ArchConfig) -> _data.Dataset:
    d = _data.load_dataset(path)
    if d.image_size != arch.input_size:
        raise DataError(f"dataset {path} has image size {d.image_size}, "
                        f"arch expects {arch.input_size}")
    return d


def _load_ckpt(path, arch: _model.ArchConfig | None = None) -> _model.ModelParams:
    return _model.load_params(path, expect_arch=arch)


def _write_phase_outputs(out_dir: Path, params, report: _train.PhaseReport) -> None:
    _model.save_params(params, out_dir / "checkpoint.ckpt")
    (out_dir / "phase_report.json").write_text(
        json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")
    (out_dir / "timings.json").write_text(
        json.dumps({report.phase: round(report.wall_time, 3)}, indent=2) + "\n")


# ---------------------------------------------------------------------------
# commands


def _cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    synth = cfg.synthetic
    if args.seed is not None:
        synth = replace(synth, seed=args.seed)
    if args.num_samples is not None:
        synth = replace(synth, num_samples=args.num_samples)
    dataset = _data.generate_synthetic(synth)
    out = Path(args.out)
    _data.save_dataset(dataset, out)
    _config.write_effective_config(replace(cfg, synthetic=synth), out)
    print(f"wrote {len(dataset)} samples to {out}")
    return 0


def _pretrain_common(args, phase: str) -> int:
    cfg = _load_cfg(args)
    tcfg = cfg.train
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset_checked(args.data, cfg.arch)
    if args.init:
        params = _load_ckpt(args.init, cfg.arch)
    else:
        params = _model.init_params(cfg.arch, tcfg.seed)
    log = _train.StepLogger(out / "train_log.jsonl")
    try:
        if phase == "cls":
            steps = args.steps if args.steps is not None else cfg.protocol.cls_steps
            params, report = _train.pretrain_classifier(
                params, dataset, replace(tcfg, n_steps=steps), log)
        elif phase == "det":
            steps = args.steps if args.steps is not None else cfg.protocol.det_steps
            cls_steps = args.cls_steps if args.cls_steps is not None else cfg.protocol.det_cls_steps
            params, report = _train.pretrain_detection(
                params, dataset, replace(tcfg, n_steps=steps),
                replace(tcfg, n_steps=cls_steps), log)
        else:
            steps = args.steps if args.steps is not None else cfg.protocol.seg_steps
            cls_steps = args.cls_steps if args.cls_steps is not None else cfg.protocol.seg_cls_steps
            params, report = _train.pretrain_segmentation(
                params, dataset, replace(tcfg, n_steps=steps),
                replace(tcfg, n_steps=cls_steps), log)
    finally:
        log.close()
    _write_phase_outputs(out, params, report)
    _config.write_effective_config(cfg, out)
    print(f"{report.phase}: {report.steps} steps, final losses {report.final_losses}")
    return 0


def _cmd_train_mtl(args) -> int:
    cfg = _load_cfg(args)
    tcfg = cfg.train
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    steps = args.steps if args.steps is not None else cfg.protocol.mtl_steps
    tcfg = replace(tcfg, n_steps=steps)
    mode = args.mode or cfg.protocol.mtl_mode
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = _load_ckpt(args.init, cfg.arch)
    log = _train.StepLogger(out / "train_log.jsonl")
    try:
        if mode == "alternating":
            d_det = _load_dataset_checked(args.det_data, cfg.arch)
            d_seg = _load_dataset_checked(args.seg_data or args.det_data, cfg.arch)
            params, report = _train.train_mtl_alternating(params, d_det, d_seg, tcfg, log)
        elif mode == "joint":
            src = args.joint_data or args.seg_data or args.det_data
            if src is None:
                raise ConfigError("joint mode needs --joint-data (or --seg-data)")
            d_joint = _load_dataset_checked(src, cfg.arch)
            params, report = _train.train_mtl_joint(params, d_joint, tcfg, log)
        else:
            raise ConfigError(f"unknown MTL mode {mode!r}")
    finally:
        log.close()
    _write_phase_outputs(out, params, report)
    _config.write_effective_config(cfg, out)
    print(f"mtl ({mode}): {report.steps} steps, final losses {report.final_losses}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = _load_cfg(args)
    tcfg = cfg.train
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    steps = args.steps if args.steps is not None else cfg.protocol.transfer_steps
    tcfg = replace(tcfg, n_steps=steps)
    freeze = cfg.protocol.transfer_freeze_feats if args.freeze_feats is None else args.freeze_feats
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d_new = _load_dataset_checked(args.data, cfg.arch)
    c_new = args.new_classes if args.new_classes is not None else d_new.num_classes
    params = _load_ckpt(args.init)

    before = reinit_decision_layer(params, c_new, tcfg.seed)
    rep_before = _metrics.evaluate(before, d_new, tasks=("cls",),
                                   threshold=tcfg.filter_threshold,
                                   n_resamples=cfg.eval.n_resamples, seed=tcfg.seed,
                                   batch_size=cfg.eval.batch_size,
                                   dataset_id=str(args.data))
    rep_before.save(out, "eval_before")

    log = _train.StepLogger(out / "train_log.jsonl")
    try:
        params, report = finetune_new_disease(
            params, d_new, c_new, tcfg, freeze_feats=freeze,
            feats_lr_scale=cfg.protocol.transfer_feats_lr_scale, log=log)
    finally:
        log.close()
    rep_after = _metrics.evaluate(params, d_new, tasks=("cls",),
                                  threshold=tcfg.filter_threshold,
                                  n_resamples=cfg.eval.n_resamples, seed=tcfg.seed,
                                  batch_size=cfg.eval.batch_size,
                                  dataset_id=str(args.data))
    rep_after.save(out, "eval_after")
    _write_phase_outputs(out, params, report)
    _config.write_effective_config(cfg, out)
    print(f"transfer: f1 before {rep_before.metrics['f1'].estimate:.3f} "
          f"-> after {rep_after.metrics['f1'].estimate:.3f}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    params = _load_ckpt(args.checkpoint)
    dataset = _load_dataset_checked(args.data, params.arch)
    if args.tasks:
        tasks = tuple(t.strip() for t in args.tasks.split(",") if t.strip())
        bad = [t for t in tasks if t not in _data.TASKS]
        if bad:
            raise ConfigError(f"unknown tasks {bad}; choose from {_data.TASKS}")
    else:
        tasks = tuple(t for t in _data.TASKS if t in dataset.task_coverage)
    threshold = args.threshold if args.threshold is not None else cfg.train.filter_threshold
    report = _metrics.evaluate(params, dataset, tasks=tasks, threshold=threshold,
                               iou_threshold=cfg.eval.map_iou,
                               n_resamples=cfg.eval.n_resamples,
                               seed=args.seed if args.seed is not None else cfg.train.seed,
                               batch_size=cfg.eval.batch_size, dataset_id=str(args.data))
    report.save(out)
    _config.write_effective_config(cfg, out)
    print(report.to_text())
    return 0


def _cmd_render(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = _load_ckpt(args.checkpoint)
    dataset = _load_dataset_checked(args.data, params.arch)
    threshold = args.threshold if args.threshold is not None else cfg.train.filter_threshold
    n = min(args.limit, len(dataset)) if args.limit else len(dataset)
    idx = np.arange(n)
    batch = dataset.batch(idx)
    diags = _pipeline.infer_pipeline(params, batch.image_batch, threshold)
    _pipeline.save_diagnoses(diags, out)
    for i in idx:
        gt = dataset.bundles[i].boxes if "det" in dataset.task_coverage else None
        _pipeline.render_overlay(dataset.images[i], diags[i],
                                 out / f"{dataset.ids[i]}_overlay.png", gt_boxes=gt)
    _config.write_effective_config(cfg, out)
    print(f"wrote {n} overlays to {out}")
    return 0


def _cmd_run_protocol(args) -> int:
    cfg = _load_cfg(args)
    proto = cfg.protocol
    if args.mode:
        proto = replace(proto, mtl_mode=args.mode)
    if args.seed is not None:
        proto = replace(proto, train=replace(proto.train, seed=args.seed))
    out = Path(args.out)
    datasets = {
        "cls": _load_dataset_checked(args.cls_data, cfg.arch),
        "det": _load_dataset_checked(args.det_data, cfg.arch),
        "seg": _load_dataset_checked(args.seg_data, cfg.arch),
    }
    if args.transfer_data:
        datasets["transfer"] = _load_dataset_checked(args.transfer_data, cfg.arch)
    _, reports = _train.run_protocol(datasets, cfg.arch, proto, out)
    _config.write_effective_config(replace(cfg, protocol=proto), out)
    for r in reports:
        print(f"{r.phase}: {r.steps} steps, final losses {r.final_losses}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xraymtl",
                                     description="multi-task X-ray toy lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--num-samples", type=int)
    p.set_defaults(func=_cmd_gen_data)

    for phase in ("cls", "det", "seg"):
        p = sub.add_parser(f"pretrain-{phase}", help=f"pre-train encoder + {phase} head")
        _add_common(p)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--init", help="input checkpoint (fresh init when omitted)")
        p.add_argument("--steps", type=int)
        p.add_argument("--seed", type=int)
        if phase in ("det", "seg"):
            p.add_argument("--cls-steps", type=int,
                           help="classifier refresh steps before head training")
        p.set_defaults(func=lambda a, ph=phase: _pretrain_common(a, ph))

    p = sub.add_parser("train-mtl", help="multi-task training (alternating or joint)")
    _add_common(p)
    p.add_argument("--det-data")
    p.add_argument("--seg-data")
    p.add_argument("--joint-data")
    p.add_argument("--init", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("alternating", "joint"))
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_train_mtl)

    p = sub.add_parser("finetune", help="transfer the classifier to new classes")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--init", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--new-classes", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    grp = p.add_mutually_exclusive_group()
    grp.add_argument("--freeze-feats", dest="freeze_feats", action="store_true", default=None)
    grp.add_argument("--no-freeze-feats", dest="freeze_feats", action="store_false")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tasks", help="comma list from cls,det,seg (default: coverage)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("render", help="write overlay PNGs (masks + boxes)")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=16)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("run-protocol", help="run all phases in order")
    _add_common(p)
    p.add_argument("--cls-data", required=True)
    p.add_argument("--det-data", required=True)
    p.add_argument("--seg-data", required=True)
    p.add_argument("--transfer-data")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("alternating", "joint"))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_run_protocol)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
