"""Training: single gradient steps, the staged pre-training phases, and
the two multi-task modes (alternating batches vs joint loss).

Phases follow a fixed order: classifier pre-training, detection head
pre-training (classifier refresh + head training on positives),
segmentation head pre-training (same shape), multi-task training, and
optionally transfer fine-tuning. Each phase runs a fixed step budget
with its own Adam state and writes one checkpoint plus a PhaseReport.

Alternating multi-task training runs one detection step then one
segmentation step per iteration, updating the encoder in both and
freezing the head that is not in play. Batches for head training are
composed with teacher forcing: ground-truth positives with probability
p, else whatever the first-stage filter passed from a random candidate
batch.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as _model
from .data import Batch, Dataset, derive_classification_labels, ensure_joint
from .errors import ConfigError, DataError, TrainingDiverged
from .losses import (DEFAULT_IOU_THRESHOLD, loss_cls, loss_cls_grad, loss_det,
                     loss_det_grad, loss_seg, loss_seg_grad, match_batch)
from .pipeline import (DEFAULT_FILTER_THRESHOLD, TeacherForcer,
                       TeacherForcingConfig, filter_positives)

PHASE_ORDER = ("pretrain_cls", "pretrain_det", "pretrain_seg", "mtl", "transfer")
_PHASE_SALT = {name: i + 1 for i, name in enumerate(PHASE_ORDER)}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    n_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    teacher_forcing: TeacherForcingConfig = field(default_factory=TeacherForcingConfig)
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    freeze: frozenset[str] = frozenset()
    filter_threshold: float = DEFAULT_FILTER_THRESHOLD
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
    mtl_include_cls: bool = False

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.n_steps < 0:
            raise ConfigError("n_steps must be >= 0")
        if not self.freeze <= set(_model.GROUPS):
            raise ConfigError(f"freeze must be a subset of {_model.GROUPS}")
        self.teacher_forcing.validate()


@dataclass
class PhaseReport:
    phase: str
    steps: int
    final_losses: dict[str, float]
    wall_time: float
    delta_norms: dict[str, float]
    extra: dict = field(default_factory=dict)

    def to_json_dict(self, include_wall_time: bool = False) -> dict:
        d = {"phase": self.phase, "steps": self.steps,
             "final_losses": self.final_losses, "delta_norms": self.delta_norms,
             "extra": self.extra}
        if include_wall_time:
            d["wall_time"] = self.wall_time
        return d


class StepLogger:
    """Line-delimited training log: one record per step."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "a")

    def log(self, phase: str, step: int, loss_name: str, loss: float) -> None:
        self._f.write(json.dumps(
            {"phase": phase, "step": step, "loss_name": loss_name, "loss": loss}) + "\n")

    def close(self) -> None:
        self._f.close()


class Adam:
    """Adam over flat (group, name)-keyed arrays. Moments tick only when a
    key receives a gradient, so groups idle in a sub-step keep their state."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def step(self, params_flat: dict, grads: dict, lr_scale: dict | None = None) -> None:
        for key, g in grads.items():
            if key not in self.m:
                self.m[key] = np.zeros_like(g)
                self.v[key] = np.zeros_like(g)
                self.t[key] = 0
            self.t[key] += 1
            t = self.t[key]
            self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * g * g
            mhat = self.m[key] / (1 - self.beta1 ** t)
            vhat = self.v[key] / (1 - self.beta2 ** t)
            lr = self.lr * (lr_scale.get(key, 1.0) if lr_scale else 1.0)
            params_flat[key] -= lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# forward/backward plumbing shared by train_step and the gradient checks


def forward_losses(params: _model.ModelParams, batch: Batch, active_loss: str,
                   cfg: TrainConfig) -> dict[str, float]:
    """Loss values only (used by finite-difference checks)."""
    losses, _ = _forward_backward(params, batch, active_loss, cfg, want_grads=False)
    return losses


def compute_grads(params: _model.ModelParams, batch: Batch, active_loss: str,
                  cfg: TrainConfig):
    """Losses plus analytic gradients keyed by (group, name)."""
    return _forward_backward(params, batch, active_loss, cfg, want_grads=True)


def _forward_backward(params, batch, active_loss, cfg, want_grads):
    if active_loss not in ("cls", "det", "seg", "joint"):
        raise ConfigError(f"unknown active loss {active_loss!r}")
    weights = {"cls": 1.0, "det": 1.0, "seg": 1.0}
    if active_loss == "joint":
        weights = dict(zip(("cls", "det", "seg"), cfg.loss_weights))
        tasks = [t for t in ("cls", "det", "seg") if weights[t] != 0.0]
    else:
        tasks = [active_loss]

    feats, enc_cache = _model._encode_fwd(params, batch.pixels)
    losses: dict[str, float] = {}
    grads: dict = {}
    dfeats_total = np.zeros_like(feats) if want_grads else None

    for task in tasks:
        w = weights[task]
        if task == "cls":
            if batch.cls is None:
                raise DataError("batch has no class labels for a cls step")
            probs, cache = _model._cls_fwd(params, feats)
            lval = loss_cls(batch.cls, probs)
            if want_grads:
                gout, dfeats = _model._cls_bwd(params, cache, w * loss_cls_grad(batch.cls, probs))
        elif task == "det":
            if batch.boxes is None:
                raise DataError("batch has no box labels for a det step")
            matches = match_batch(batch.boxes, params.arch.anchors(), cfg.iou_threshold)
            pred, cache = _model._det_fwd(params, feats)
            lval = loss_det(batch.boxes, pred, matches)
            if want_grads:
                gout, dfeats = _model._det_bwd(params, cache, w * loss_det_grad(batch.boxes, pred, matches))
        else:
            if batch.masks is None:
                raise DataError("batch has no masks for a seg step")
            mask_probs, cache = _model._seg_fwd(params, feats)
            lval = loss_seg(batch.masks, mask_probs)
            if want_grads:
                gout, dfeats = _model._seg_bwd(params, cache, w * loss_seg_grad(batch.masks, mask_probs))
        losses[task] = lval
        if want_grads:
            for k, g in gout.items():
                grads[(task, k)] = g
            dfeats_total += dfeats

    losses["total"] = sum(weights[t] * losses[t] for t in tasks)
    if want_grads and "enc" not in cfg.freeze:
        enc_grads, _ = _model._enc_bwd(params, enc_cache, dfeats_total)
        for k, g in enc_grads.items():
            grads[("enc", k)] = g
    return losses, (grads if want_grads else None)


def train_step(params: _model.ModelParams, batch: Batch, active_loss: str,
               cfg: TrainConfig, optimizer: Adam | None = None):
    """One gradient update on the groups touched by the active loss and
    not frozen. Parameters are updated in place; frozen groups stay
    bitwise untouched. Returns (params, metrics)."""
    cfg.validate()
    if optimizer is None:
        optimizer = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    losses, grads = compute_grads(params, batch, active_loss, cfg)
    for name, value in losses.items():
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite {name} loss ({value}) during a {active_loss} step")
    grads = {key: g for key, g in grads.items() if key[0] not in cfg.freeze}
    if grads:
        optimizer.step(params.flat(), grads)
    metrics = {f"loss_{k}": v for k, v in losses.items() if k != "total"}
    metrics["loss"] = losses["total"]
    return params, metrics


# ---------------------------------------------------------------------------
# phase helpers


def group_delta_norms(before: _model.ModelParams, after: _model.ModelParams) -> dict[str, float]:
    out = {}
    for g in _model.GROUPS:
        sq = 0.0
        for k, arr in after.group(g).items():
            diff = arr - before.group(g)[k]
            sq += float((diff * diff).sum())
        out[g] = float(np.sqrt(sq))
    return out


def _sample_batch(d: Dataset, rng: np.random.Generator, batch_size: int) -> Batch:
    idx = rng.integers(0, len(d), size=batch_size)
    return d.batch(idx)


def _phase_rng(cfg: TrainConfig, phase: str) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, _PHASE_SALT.get(phase, 0)])


def _teacher_forced_batch(params, d_all: Dataset, d_pos: Dataset, forcer: TeacherForcer,
                          rng: np.random.Generator, cfg: TrainConfig) -> Batch:
    """Ground-truth positives with probability p, else the filter's picks
    from a random candidate batch (falls back to positives when the
    filter passes nothing)."""
    gt_batch = _sample_batch(d_pos, rng, cfg.batch_size)
    candidates = _sample_batch(d_all, rng, cfg.batch_size)
    passed, _, _ = filter_positives(params, candidates.image_batch, cfg.filter_threshold)
    if passed:
        filtered = Batch(candidates.pixels[passed],
                         [candidates.ids[i] for i in passed],
                         None if candidates.cls is None else candidates.cls[passed],
                         None if candidates.boxes is None else [candidates.boxes[i] for i in passed],
                         None if candidates.masks is None else candidates.masks[passed])
    else:
        filtered = gt_batch
    batch, _ = forcer.select(gt_batch, filtered)
    return batch


def _run_simple_phase(params, dataset: Dataset, phase: str, active_loss: str,
                      cfg: TrainConfig, optimizer: Adam, rng, log: StepLogger | None,
                      teacher_forced: bool = False, d_pos: Dataset | None = None,
                      forcer: TeacherForcer | None = None) -> dict[str, float]:
    final_losses: dict[str, float] = {}
    for step in range(cfg.n_steps):
        if teacher_forced:
            batch = _teacher_forced_batch(params, dataset, d_pos, forcer, rng, cfg)
        else:
            batch = _sample_batch(dataset, rng, cfg.batch_size)
        _, metrics = train_step(params, batch, active_loss, cfg, optimizer)
        final_losses = metrics
        if log:
            log.log(phase, step, active_loss, metrics["loss"])
    return final_losses


# ---------------------------------------------------------------------------
# the five phases


def pretrain_classifier(params: _model.ModelParams, d_cls: Dataset, cfg: TrainConfig,
                        log: StepLogger | None = None):
    """Encoder + classification head on class labels (positives and negatives)."""
    cfg.validate()
    if "cls" not in d_cls.task_coverage:
        raise DataError("classifier pre-training needs cls coverage")
    before = params.copy()
    t0 = time.perf_counter()
    rng = _phase_rng(cfg, "pretrain_cls")
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    final = _run_simple_phase(params, d_cls, "pretrain_cls", "cls", cfg, opt, rng, log)
    report = PhaseReport("pretrain_cls", cfg.n_steps, final,
                         time.perf_counter() - t0, group_delta_norms(before, params))
    return params, report


def _pretrain_head(params, dataset: Dataset, cfg: TrainConfig, task: str,
                   cls_cfg: TrainConfig | None, log: StepLogger | None):
    phase = f"pretrain_{task}"
    coverage = "det" if task == "det" else "seg"
    if coverage not in dataset.task_coverage:
        raise DataError(f"{phase} needs {coverage} coverage")
    before = params.copy()
    t0 = time.perf_counter()
    rng = _phase_rng(cfg, phase)

    # sub-phase (a): refresh the classifier on labels derived from this
    # dataset, negatives included, so the filter stays calibrated
    if cls_cfg is None:
        cls_cfg = replace(cfg, n_steps=max(1, cfg.n_steps // 2))
    d_cls = derive_classification_labels(dataset, source=coverage)
    opt_cls = Adam(cls_cfg.learning_rate, cls_cfg.beta1, cls_cfg.beta2, cls_cfg.adam_eps)
    _run_simple_phase(params, d_cls, f"{phase}_cls", "cls", cls_cfg, opt_cls, rng, log)

    # sub-phase (b): the head itself, positives only plus teacher forcing
    pos_idx = dataset.positive_indices()
    if len(pos_idx) == 0:
        raise DataError(f"{phase}: dataset has no positive samples")
    d_pos = dataset.subset(pos_idx)
    forcer = TeacherForcer(cfg.teacher_forcing, salt=_PHASE_SALT[phase])
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    final = _run_simple_phase(params, dataset, phase, task, cfg, opt, rng, log,
                              teacher_forced=True, d_pos=d_pos, forcer=forcer)
    report = PhaseReport(phase, cfg.n_steps, final, time.perf_counter() - t0,
                         group_delta_norms(before, params),
                         extra={"classifier_steps": cls_cfg.n_steps,
                                "forcing_rate": forcer.forcing_rate})
    return params, report


def pretrain_detection(params, d_det: Dataset, cfg: TrainConfig,
                       cls_cfg: TrainConfig | None = None, log: StepLogger | None = None):
    """Classifier refresh on detection-derived labels, then encoder +
    detection head on positive samples under teacher forcing."""
    cfg.validate()
    return _pretrain_head(params, d_det, cfg, "det", cls_cfg, log)


def pretrain_segmentation(params, d_seg: Dataset, cfg: TrainConfig,
                          cls_cfg: TrainConfig | None = None, log: StepLogger | None = None):
    """Mirror of detection pre-training for the segmentation head."""
    cfg.validate()
    return _pretrain_head(params, d_seg, cfg, "seg", cls_cfg, log)


def train_mtl_alternating(params: _model.ModelParams, d_det: Dataset, d_seg: Dataset,
                          cfg: TrainConfig, log: StepLogger | None = None):
    """One detection step then one segmentation step per iteration; the
    encoder learns in both, the idle head is frozen. Per-iteration
    parameter-delta norms are recorded in the report."""
    cfg.validate()
    if "det" not in d_det.task_coverage:
        raise DataError("alternating MTL: detection dataset lacks boxes")
    if "seg" not in d_seg.task_coverage:
        raise DataError("alternating MTL: segmentation dataset lacks masks")
    det_pos = d_det.positive_indices()
    seg_pos = d_seg.positive_indices()
    if len(det_pos) == 0 or len(seg_pos) == 0:
        raise DataError("alternating MTL: a dataset is empty of positives")
    d_det_pos = d_det.subset(det_pos)
    d_seg_pos = d_seg.subset(seg_pos)

    before = params.copy()
    t0 = time.perf_counter()
    rng = _phase_rng(cfg, "mtl")
    forcer = TeacherForcer(cfg.teacher_forcing, salt=_PHASE_SALT["mtl"])
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    det_cfg = replace(cfg, freeze=cfg.freeze | {"seg", "cls"})
    seg_cfg = replace(cfg, freeze=cfg.freeze | {"det", "cls"})
    cls_mix = None
    if cfg.mtl_include_cls:
        cls_mix = (derive_classification_labels(d_det, "det"),
                   derive_classification_labels(d_seg, "seg"))

    substep_deltas: list[dict[str, dict[str, float]]] = []
    final: dict[str, float] = {}
    for step in range(cfg.n_steps):
        entry: dict[str, dict[str, float]] = {}

        snap = params.copy()
        batch = _teacher_forced_batch(params, d_det, d_det_pos, forcer, rng, cfg)
        _, m_det = train_step(params, batch, "det", det_cfg, opt)
        entry["det_substep"] = group_delta_norms(snap, params)
        if log:
            log.log("mtl", step, "det", m_det["loss"])

        snap = params.copy()
        batch = _teacher_forced_batch(params, d_seg, d_seg_pos, forcer, rng, cfg)
        _, m_seg = train_step(params, batch, "seg", seg_cfg, opt)
        entry["seg_substep"] = group_delta_norms(snap, params)
        if log:
            log.log("mtl", step, "seg", m_seg["loss"])

        if cfg.mtl_include_cls:
            d_cls = cls_mix[step % 2]
            batch = _sample_batch(d_cls, rng, cfg.batch_size)
            _, m_cls = train_step(params, batch, "cls", cfg, opt)
            if log:
                log.log("mtl", step, "cls", m_cls["loss"])

        substep_deltas.append(entry)
        final = {"loss_det": m_det["loss"], "loss_seg": m_seg["loss"]}
    report = PhaseReport("mtl", cfg.n_steps, final, time.perf_counter() - t0,
                         group_delta_norms(before, params),
                         extra={"mode": "alternating", "substep_deltas": substep_deltas,
                                "forcing_rate": forcer.forcing_rate})
    return params, report


def train_mtl_joint(params: _model.ModelParams, d_joint: Dataset, cfg: TrainConfig,
                    log: StepLogger | None = None):
    """End-to-end steps on the weighted sum of the three losses; boxes are
    fitted from masks first when the dataset lacks them."""
    cfg.validate()
    if not {"cls", "det", "seg"} <= d_joint.task_coverage:
        d_joint = ensure_joint(d_joint)
    before = params.copy()
    t0 = time.perf_counter()
    rng = _phase_rng(cfg, "mtl")
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    final: dict[str, float] = {}
    for step in range(cfg.n_steps):
        batch = _sample_batch(d_joint, rng, cfg.batch_size)
        _, metrics = train_step(params, batch, "joint", cfg, opt)
        final = metrics
        if log:
            log.log("mtl", step, "joint", metrics["loss"])
    report = PhaseReport("mtl", cfg.n_steps, final, time.perf_counter() - t0,
                         group_delta_norms(before, params), extra={"mode": "joint"})
    return params, report


# ---------------------------------------------------------------------------
# the full protocol


@dataclass(frozen=True)
class ProtocolConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    cls_steps: int = 400
    det_cls_steps: int = 150
    det_steps: int = 600
    seg_cls_steps: int = 150
    seg_steps: int = 600
    mtl_steps: int = 2000
    mtl_mode: str = "alternating"
    # the protocol's phase list trains the classifier during MTL too (the
    # shared-encoder filter rots otherwise); the bare alternating op
    # defaults to det/seg only
    mtl_include_cls: bool = True
    # MTL fine-tunes already pre-trained parts; a smaller step keeps the
    # alternating updates from eroding each other
    mtl_learning_rate: float | None = 3e-4
    transfer_steps: int = 200
    transfer_freeze_feats: bool = True
    transfer_feats_lr_scale: float = 0.1

    def validate(self) -> None:
        self.train.validate()
        if self.mtl_mode not in ("alternating", "joint"):
            raise ConfigError(f"mtl_mode must be 'alternating' or 'joint', got {self.mtl_mode!r}")
        for name in ("cls_steps", "det_cls_steps", "det_steps", "seg_cls_steps",
                     "seg_steps", "mtl_steps", "transfer_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


def run_protocol(datasets: dict[str, Dataset], arch: _model.ArchConfig,
                 proto: ProtocolConfig, out_dir,
                 init: _model.ModelParams | None = None):
    """Execute the phases in order, checkpointing after each. datasets
    must provide 'cls', 'det' and 'seg' entries (one dataset may serve
    several roles); a 'transfer' entry triggers the fine-tuning phase."""
    proto.validate()
    for role in ("cls", "det", "seg"):
        if role not in datasets:
            raise DataError(f"run_protocol: missing dataset role {role!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = StepLogger(out_dir / "train_log.jsonl")
    base = proto.train
    reports: list[PhaseReport] = []

    params = init.copy() if init is not None else _model.init_params(arch, base.seed)
    try:
        params, rep = pretrain_classifier(params, datasets["cls"],
                                          replace(base, n_steps=proto.cls_steps), log)
        _finish_phase(params, rep, reports, out_dir)

        params, rep = pretrain_detection(params, datasets["det"],
                                         replace(base, n_steps=proto.det_steps),
                                         replace(base, n_steps=proto.det_cls_steps), log)
        _finish_phase(params, rep, reports, out_dir)

        params, rep = pretrain_segmentation(params, datasets["seg"],
                                            replace(base, n_steps=proto.seg_steps),
                                            replace(base, n_steps=proto.seg_cls_steps), log)
        _finish_phase(params, rep, reports, out_dir)

        mtl_cfg = replace(base, n_steps=proto.mtl_steps,
                          mtl_include_cls=proto.mtl_include_cls)
        if proto.mtl_learning_rate is not None:
            mtl_cfg = replace(mtl_cfg, learning_rate=proto.mtl_learning_rate)
        if proto.mtl_mode == "alternating":
            params, rep = train_mtl_alternating(params, datasets["det"], datasets["seg"],
                                                mtl_cfg, log)
        else:
            joint = datasets.get("joint", datasets["seg"])
            params, rep = train_mtl_joint(params, joint, mtl_cfg, log)
        _finish_phase(params, rep, reports, out_dir)

        if "transfer" in datasets:
            from .transfer import finetune_new_disease

            d_new = datasets["transfer"]
            params, rep = finetune_new_disease(
                params, d_new, d_new.num_classes,
                replace(base, n_steps=proto.transfer_steps),
                freeze_feats=proto.transfer_freeze_feats,
                feats_lr_scale=proto.transfer_feats_lr_scale, log=log)
            _finish_phase(params, rep, reports, out_dir)
    finally:
        log.close()

    (out_dir / "phase_reports.json").write_text(json.dumps(
        [r.to_json_dict() for r in reports], indent=2, sort_keys=True) + "\n")
    (out_dir / "timings.json").write_text(json.dumps(
        {r.phase: round(r.wall_time, 3) for r in reports}, indent=2, sort_keys=True) + "\n")
    return params, reports


def _finish_phase(params, report: PhaseReport, reports: list, out_dir: Path) -> None:
    reports.append(report)
    _model.save_params(params, out_dir / f"phase_{report.phase}.ckpt")
