"""Transfer of the classification path to unseen disease classes.

The classification head splits at its final linear layer: the feature
layers carry over from the trained model, the decision layer is
re-initialized for the new class count and trained from scratch. The
feature layers and encoder are frozen by default; unfrozen they train
at a reduced learning rate. Detection and segmentation parameters are
never touched.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import model as _model
from .data import Dataset
from .errors import ConfigError, DataError
from .train import Adam, PhaseReport, StepLogger, TrainConfig, _phase_rng, _sample_batch, compute_grads, group_delta_norms

_DEC_KEYS = ("out_w", "out_b")


@dataclass
class ClsFactorization:
    """Classification head split: feature layers vs final decision layer."""

    feats: dict[str, np.ndarray]
    dec: dict[str, np.ndarray]

    def recombine(self) -> dict[str, np.ndarray]:
        return {**{k: v.copy() for k, v in self.feats.items()},
                **{k: v.copy() for k, v in self.dec.items()}}


def factorize_cls_params(params: _model.ModelParams) -> ClsFactorization:
    """Lossless split of the classification head at its output layer."""
    if not all(k in params.cls for k in _DEC_KEYS):
        raise ConfigError("classification head has no final linear layer to split at")
    dec = {k: params.cls[k].copy() for k in _DEC_KEYS}
    feats = {k: v.copy() for k, v in params.cls.items() if k not in _DEC_KEYS}
    return ClsFactorization(feats=feats, dec=dec)


def reinit_decision_layer(params: _model.ModelParams, c_new: int, seed: int) -> _model.ModelParams:
    """New params with the decision layer re-drawn for c_new outputs and
    the arch record updated; everything else copied over."""
    if c_new < 1:
        raise ConfigError("new class count must be >= 1")
    rng = np.random.default_rng([seed, 101])
    hidden = params.arch.cls_hidden
    out = params.copy()
    out.arch = replace(params.arch, num_classes=c_new)
    out.cls["out_w"] = rng.standard_normal((hidden, c_new)) * np.sqrt(2.0 / hidden)
    out.cls["out_b"] = np.zeros(c_new)
    return out


def finetune_new_disease(params: _model.ModelParams, d_new: Dataset, c_new: int,
                         cfg: TrainConfig, freeze_feats: bool = True,
                         feats_lr_scale: float = 0.1,
                         log: StepLogger | None = None):
    """Fine-tune the classification path on a new-disease dataset. The
    decision layer always trains; encoder and feature layers train at
    feats_lr_scale * lr unless freeze_feats. Returns (params, report)."""
    cfg.validate()
    if len(d_new) == 0:
        raise DataError("transfer: new-disease dataset is empty")
    if c_new < 1:
        raise ConfigError("transfer: new class count must be >= 1")
    if "cls" not in d_new.task_coverage:
        raise DataError("transfer: new-disease dataset has no class labels")
    if d_new.num_classes != c_new:
        raise DataError(f"transfer: dataset carries {d_new.num_classes} classes, expected {c_new}")

    params = reinit_decision_layer(params, c_new, cfg.seed)
    before = params.copy()
    t0 = time.perf_counter()
    rng = _phase_rng(cfg, "transfer")
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)

    frozen_keys = set()
    lr_scale: dict = {}
    for k in params.cls:
        if k in _DEC_KEYS:
            continue
        if freeze_feats:
            frozen_keys.add(("cls", k))
        else:
            lr_scale[("cls", k)] = feats_lr_scale
    for k in params.enc:
        if freeze_feats:
            frozen_keys.add(("enc", k))
        else:
            lr_scale[("enc", k)] = feats_lr_scale

    step_cfg = replace(cfg, freeze=cfg.freeze | ({"enc"} if freeze_feats else frozenset()))
    final: dict[str, float] = {}
    for step in range(cfg.n_steps):
        batch = _sample_batch(d_new, rng, cfg.batch_size)
        losses, grads = compute_grads(params, batch, "cls", step_cfg)
        if not np.isfinite(losses["total"]):
            raise DataError(f"transfer fine-tuning diverged at step {step}")
        grads = {key: g for key, g in grads.items()
                 if key not in frozen_keys and key[0] not in ("det", "seg")}
        opt.step(params.flat(), grads, lr_scale)
        final = {"loss_cls": losses["cls"], "loss": losses["total"]}
        if log:
            log.log("transfer", step, "cls", losses["total"])

    deltas = group_delta_norms(before, params)
    fact = factorize_cls_params(params)
    fact_before = factorize_cls_params(before)
    feats_delta = float(np.sqrt(sum(
        float(((fact.feats[k] - fact_before.feats[k]) ** 2).sum()) for k in fact.feats)))
    report = PhaseReport("transfer", cfg.n_steps, final, time.perf_counter() - t0, deltas,
                         extra={"freeze_feats": freeze_feats, "new_classes": c_new,
                                "feats_delta_norm": feats_delta})
    return params, report
