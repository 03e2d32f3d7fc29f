"""Two-stage inference pipeline and teacher-forced batch composition.

The classification path acts as a first-stage filter: samples whose max
class probability clears the threshold go on to the detection and
segmentation heads, the rest stop with a class-probabilities-only
diagnosis. The encoder output is computed once per batch and shared by
both stages; `infer_pipeline_reference` deliberately re-encodes and
exists only to validate the cached path against it.

Teacher forcing composes head-training batches: with probability p the
ground-truth positive batch is used, otherwise whatever the filter let
through (which occasionally includes its false positives).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from . import model as _model
from .data import _CROSS, Batch, Box, ImageBatch, iou_matrix
from .errors import ConfigError

DEFAULT_FILTER_THRESHOLD = 0.5
DEFAULT_MIN_AREA = 1e-4
DEFAULT_MERGE_IOU = 0.5


# ---------------------------------------------------------------------------
# teacher forcing


@dataclass(frozen=True)
class TeacherForcingConfig:
    p: float = 0.9
    granularity: str = "batch"  # or "sample"
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"teacher forcing p must lie in [0, 1], got {self.p}")
        if self.granularity not in ("batch", "sample"):
            raise ConfigError(f"granularity must be 'batch' or 'sample', got {self.granularity!r}")


def _mix_batches(gt: Batch, other: Batch, take_gt: np.ndarray) -> Batch:
    n = min(len(gt), len(other))
    take_gt = take_gt[:n]
    pick = lambda a, b, i: a[i] if take_gt[i] else b[i]
    pixels = np.stack([pick(gt.pixels, other.pixels, i) for i in range(n)])
    ids = [pick(gt.ids, other.ids, i) for i in range(n)]
    cls = None
    if gt.cls is not None and other.cls is not None:
        cls = np.stack([pick(gt.cls, other.cls, i) for i in range(n)])
    boxes = None
    if gt.boxes is not None and other.boxes is not None:
        boxes = [pick(gt.boxes, other.boxes, i) for i in range(n)]
    masks = None
    if gt.masks is not None and other.masks is not None:
        masks = np.stack([pick(gt.masks, other.masks, i) for i in range(n)])
    return Batch(pixels, ids, cls, boxes, masks)


def teacher_force_select(gt_positive_batch: Batch, filtered_batch: Batch,
                         cfg: TeacherForcingConfig, rng: np.random.Generator):
    """One coin toss (per batch, or per sample) deciding whether the
    ground-truth positives or the filter's output feed this step.
    Returns (batch, forced) where forced is a bool or a bool mask."""
    cfg.validate()
    if cfg.granularity == "batch":
        forced = bool(rng.random() < cfg.p)
        return (gt_positive_batch if forced else filtered_batch), forced
    mask = rng.random(len(gt_positive_batch)) < cfg.p
    return _mix_batches(gt_positive_batch, filtered_batch, mask), mask


class TeacherForcer:
    """Owns the sequential coin-toss stream for one training run. salt
    separates streams of phases sharing one configured seed."""

    def __init__(self, cfg: TeacherForcingConfig, salt: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.rng = np.random.default_rng([cfg.seed, salt] if salt else cfg.seed)
        self.tosses = 0
        self.forced = 0

    def select(self, gt_positive_batch: Batch, filtered_batch: Batch):
        batch, forced = teacher_force_select(gt_positive_batch, filtered_batch, self.cfg, self.rng)
        if self.cfg.granularity == "batch":
            self.tosses += 1
            self.forced += int(forced)
        else:
            self.tosses += len(forced)
            self.forced += int(np.sum(forced))
        return batch, forced

    @property
    def forcing_rate(self) -> float:
        return self.forced / self.tosses if self.tosses else 0.0


# ---------------------------------------------------------------------------
# first-stage filter


def filter_positives(params: _model.ModelParams, batch: ImageBatch, threshold: float = DEFAULT_FILTER_THRESHOLD):
    """Partition a batch by the classifier: index i is positive iff the
    max class probability reaches the threshold. Returns
    (positive_indices, negative_indices, class_probs)."""
    if not params.all_finite():
        raise ValueError("filter_positives: parameters contain NaN/Inf")
    feats, _ = _model._encode_fwd(params, batch.pixels)
    probs, _ = _model._cls_fwd(params, feats)
    pos = probs.max(axis=1) >= threshold
    positive = [i for i in range(len(pos)) if pos[i]]
    negative = [i for i in range(len(pos)) if not pos[i]]
    return positive, negative, probs


# ---------------------------------------------------------------------------
# box decoding


def _clip_box_vector(vec: np.ndarray) -> Box | None:
    """Clip a raw (c_x, c_y, l, w) prediction to the unit square; None if
    the clipped box is empty."""
    cx, cy, l, w = (float(v) for v in vec)
    if cx - w / 2 >= 0.0 and cx + w / 2 <= 1.0 and cy - l / 2 >= 0.0 and cy + l / 2 <= 1.0:
        return Box(cx, cy, l, w) if l > 0.0 and w > 0.0 else None
    x0, x1 = max(cx - w / 2, 0.0), min(cx + w / 2, 1.0)
    y0, y1 = max(cy - l / 2, 0.0), min(cy + l / 2, 1.0)
    if x1 <= x0 or y1 <= y0:
        return None
    return Box(c_x=(x0 + x1) / 2, c_y=(y0 + y1) / 2, l=y1 - y0, w=x1 - x0)


def postprocess_boxes(raw: np.ndarray, anchors: np.ndarray,
                      min_area: float = DEFAULT_MIN_AREA,
                      merge_iou: float = DEFAULT_MERGE_IOU):
    """Decode one sample's (K, 4) raw predictions: drop boxes that are
    degenerate after clipping to the unit square (area < min_area), then
    merge overlapping survivors (IoU >= merge_iou), keeping the one whose
    geometry sits closest to its own anchor's reference box. Returns
    [(Box, spread)] where spread is the mean distance of merged-away
    members to the kept box (0 for unmerged boxes)."""
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.shape[1] != 4 or raw.shape[0] != anchors.shape[0]:
        raise ValueError(f"postprocess_boxes: raw must be ({anchors.shape[0]}, 4), got {raw.shape}")
    candidates = []
    for k in range(raw.shape[0]):
        if not np.isfinite(raw[k]).all():
            continue
        box = _clip_box_vector(raw[k])
        if box is None or box.area() < min_area:
            continue
        dist = float(np.linalg.norm(box.as_array() - anchors[k]))
        candidates.append((dist, k, box))
    candidates.sort(key=lambda t: (t[0], t[1]))

    kept: list[tuple[Box, list[float]]] = []
    for dist, k, box in candidates:
        merged = False
        for kbox, members in kept:
            if iou_matrix(box.as_array(), kbox.as_array())[0, 0] >= merge_iou:
                members.append(float(np.linalg.norm(box.as_array() - kbox.as_array())))
                merged = True
                break
        if not merged:
            kept.append((box, []))
    return [(box, float(np.mean(members)) if members else 0.0) for box, members in kept]


# ---------------------------------------------------------------------------
# joint diagnosis


@dataclass
class Diagnosis:
    """Per-image pipeline output; negatives carry class probabilities only."""

    image_id: str
    class_probs: np.ndarray
    positive: bool
    boxes: list[tuple[Box, float]] = field(default_factory=list)
    mask: np.ndarray | None = None

    def validate(self) -> None:
        if not self.positive and (self.boxes or self.mask is not None):
            raise ValueError("negative diagnosis must have no boxes and no mask")


def _box_pixel_bounds(box: Box, shape) -> tuple[int, int, int, int]:
    h, w = shape
    x0, y0, x1, y1 = box.corners()
    r0 = int(np.clip(np.floor(y0 * h), 0, h - 1))
    r1 = int(np.clip(np.ceil(y1 * h), r0 + 1, h))
    c0 = int(np.clip(np.floor(x0 * w), 0, w - 1))
    c1 = int(np.clip(np.ceil(x1 * w), c0 + 1, w))
    return r0, r1, c0, c1


def _mask_agreement(mask_labels: np.ndarray, comp_sizes: np.ndarray, box: Box) -> float:
    """Overlap between the box rectangle and the mask component it covers
    best: 2|box ∩ comp| / (|box| + |comp|). Punishes both boxes floating
    on background and boxes much smaller or larger than their blob."""
    r0, r1, c0, c1 = _box_pixel_bounds(box, mask_labels.shape)
    window = mask_labels[r0:r1, c0:c1]
    hit = window[window > 0]
    if hit.size == 0:
        return 0.0
    ids, counts = np.unique(hit, return_counts=True)
    best = int(np.argmax(counts))
    inter = int(counts[best])
    comp = int(comp_sizes[ids[best] - 1])
    area = window.size
    return 2.0 * inter / (area + comp)


def _score_box(box: Box, spread: float, class_prob: float,
               mask_labels: np.ndarray, comp_sizes: np.ndarray) -> float:
    """Ranking score for one kept box: the sample's class probability,
    scaled by agreement with the segmentation output and damped by the
    regression spread of merged-away duplicates."""
    return class_prob * _mask_agreement(mask_labels, comp_sizes, box) * (1.0 - min(spread, 1.0))


def _diagnose(params, ids, probs, pos_rows, det_pred, seg_pred,
              min_area: float, merge_iou: float) -> list[Diagnosis]:
    anchors = params.arch.anchors()
    diags: list[Diagnosis] = []
    row_of = {i: r for r, i in enumerate(pos_rows)}
    for i in range(probs.shape[0]):
        if i not in row_of:
            diags.append(Diagnosis(ids[i], probs[i].copy(), False))
            continue
        r = row_of[i]
        kept = postprocess_boxes(det_pred[r], anchors, min_area, merge_iou)
        base = float(probs[i].max())
        labels, n_comp = ndimage.label(seg_pred[r] >= 0.5, structure=_CROSS)
        comp_sizes = np.bincount(labels.ravel(), minlength=n_comp + 1)[1:]
        scored = [(box, _score_box(box, spread, base, labels, comp_sizes))
                  for box, spread in kept]
        diags.append(Diagnosis(ids[i], probs[i].copy(), True, scored, seg_pred[r].copy()))
    return diags


def infer_pipeline(params: _model.ModelParams, batch: ImageBatch,
                   threshold: float = DEFAULT_FILTER_THRESHOLD,
                   min_area: float = DEFAULT_MIN_AREA,
                   merge_iou: float = DEFAULT_MERGE_IOU) -> list[Diagnosis]:
    """Filter, then detect + segment the positives, encoding each batch
    exactly once (the filter and the heads share the cached features)."""
    if not params.all_finite():
        raise ValueError("infer_pipeline: parameters contain NaN/Inf")
    feats, _ = _model._encode_fwd(params, batch.pixels)
    probs, _ = _model._cls_fwd(params, feats)
    pos_rows = [i for i in range(probs.shape[0]) if probs[i].max() >= threshold]
    det_pred = seg_pred = None
    if pos_rows:
        sub = np.ascontiguousarray(feats[pos_rows])
        det_pred, _ = _model._det_fwd(params, sub)
        seg_pred, _ = _model._seg_fwd(params, sub)
    return _diagnose(params, batch.ids, probs, pos_rows, det_pred, seg_pred, min_area, merge_iou)


def infer_pipeline_reference(params: _model.ModelParams, batch: ImageBatch,
                             threshold: float = DEFAULT_FILTER_THRESHOLD,
                             min_area: float = DEFAULT_MIN_AREA,
                             merge_iou: float = DEFAULT_MERGE_IOU) -> list[Diagnosis]:
    """Uncached two-pass variant: encodes once for the filter and again
    for the heads. Kept as the oracle the cached path is checked against."""
    feats1, _ = _model._encode_fwd(params, batch.pixels)
    probs, _ = _model._cls_fwd(params, feats1)
    pos_rows = [i for i in range(probs.shape[0]) if probs[i].max() >= threshold]
    det_pred = seg_pred = None
    if pos_rows:
        feats2, _ = _model._encode_fwd(params, batch.pixels[pos_rows])
        det_pred, _ = _model._det_fwd(params, feats2)
        seg_pred, _ = _model._seg_fwd(params, feats2)
    return _diagnose(params, batch.ids, probs, pos_rows, det_pred, seg_pred, min_area, merge_iou)


# ---------------------------------------------------------------------------
# serialization and overlays


def save_diagnoses(diags: list[Diagnosis], out_dir, mask_subdir: str = "pred_masks") -> Path:
    """Write one JSON record per image plus predicted-mask PNGs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records_path = out_dir / "diagnoses.jsonl"
    with open(records_path, "w") as f:
        for d in diags:
            mask_ref = None
            if d.mask is not None:
                (out_dir / mask_subdir).mkdir(exist_ok=True)
                mask_ref = f"{mask_subdir}/{d.image_id}.png"
                arr = np.round(d.mask * 255.0).astype(np.uint8)
                Image.fromarray(arr, mode="L").save(out_dir / mask_ref)
            rec = {
                "image_id": d.image_id,
                "positive": d.positive,
                "class_probs": [float(p) for p in d.class_probs],
                "boxes": [{"c_x": b.c_x, "c_y": b.c_y, "l": b.l, "w": b.w, "score": s}
                          for b, s in d.boxes],
                "mask": mask_ref,
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return records_path


def _draw_box(draw: ImageDraw.ImageDraw, box: Box, shape, color) -> None:
    h, w = shape
    x0, y0, x1, y1 = box.corners()
    draw.rectangle([max(x0 * w, 0), max(y0 * h, 0),
                    min(x1 * w, w - 1), min(y1 * h, h - 1)], outline=color, width=1)


def render_overlay(image: np.ndarray, diag: Diagnosis, path,
                   gt_boxes: list[Box] | None = None) -> None:
    """Qualitative output: mask alpha-blend in red, predicted boxes green,
    ground-truth boxes blue."""
    h, w = image.shape
    rgb = np.repeat(np.round(image * 255.0).astype(np.uint8)[:, :, None], 3, axis=2)
    if diag.mask is not None:
        hot = diag.mask >= 0.5
        rgb[hot] = (0.55 * rgb[hot] + 0.45 * np.array([255, 40, 40])).astype(np.uint8)
    im = Image.fromarray(rgb, mode="RGB")
    draw = ImageDraw.Draw(im)
    for b, _score in diag.boxes:
        _draw_box(draw, b, (h, w), (40, 255, 60))
    for b in gt_boxes or []:
        _draw_box(draw, b, (h, w), (60, 120, 255))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    im.save(path)
