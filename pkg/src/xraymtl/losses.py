"""Task losses and anchor matching.

Classification and segmentation use binary cross entropy (mean over
samples of the summed per-output negative log-likelihood, predictions
clamped at 1e-7 before the logs). Detection is an L2 regression over
matched (anchor, ground-truth) pairs; the match is a greedy max-IoU
assignment, at most one ground truth per anchor and vice versa. The
joint loss is the weighted sum of the three, default weights (1, 1, 1).

Each loss has a companion *_grad function returning d(loss)/d(pred);
those feed the model backward passes and the finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Box, boxes_to_array, iou_matrix

CLAMP_EPS = 1e-7
DEFAULT_IOU_THRESHOLD = 0.3


@dataclass
class MatchMatrix:
    """K x B binary assignment; rows are anchors, columns ground truths."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix)
        if m.ndim != 2:
            raise ValueError(f"match matrix must be 2-D, got shape {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise ValueError("match matrix must be binary")
        if m.size and (m.sum(axis=0).max(initial=0) > 1 or m.sum(axis=1).max(initial=0) > 1):
            raise ValueError("match matrix assigns some anchor or ground truth twice")
        self.matrix = m.astype(np.uint8)

    def pairs(self) -> list[tuple[int, int]]:
        """(anchor_index, gt_index) pairs in ascending anchor order."""
        return [(int(k), int(j)) for k, j in np.argwhere(self.matrix == 1)]

    @property
    def num_matches(self) -> int:
        return int(self.matrix.sum())


def match_anchors(gt, anchors: np.ndarray, iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> MatchMatrix:
    """Greedy assignment: ground truths in descending best-IoU order each
    claim their highest-IoU unclaimed anchor, if that IoU clears the
    threshold. Ties break toward the lowest anchor index, then the lowest
    ground-truth index."""
    gt_arr = gt if isinstance(gt, np.ndarray) else boxes_to_array(gt)
    k_total = anchors.shape[0]
    b_total = gt_arr.shape[0]
    mat = np.zeros((k_total, b_total), dtype=np.uint8)
    if b_total == 0:
        return MatchMatrix(mat)
    ious = iou_matrix(anchors, gt_arr)
    best_per_gt = ious.max(axis=0)
    order = sorted(range(b_total), key=lambda j: (-best_per_gt[j], j))
    claimed = np.zeros(k_total, dtype=bool)
    for j in order:
        col = np.where(claimed, -1.0, ious[:, j])
        k = int(np.argmax(col))  # argmax takes the lowest index on ties
        if col[k] >= iou_threshold:
            mat[k, j] = 1
            claimed[k] = True
    return MatchMatrix(mat)


def match_batch(boxes_per_sample, anchors: np.ndarray,
                iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> list[MatchMatrix]:
    return [match_anchors(bx, anchors, iou_threshold) for bx in boxes_per_sample]


# ---------------------------------------------------------------------------
# binary cross entropy (classification and segmentation share the math)


def _check_bce_inputs(y: np.ndarray, yhat: np.ndarray, ndim: int, name: str) -> None:
    if y.shape != yhat.shape:
        raise ValueError(f"{name}: target shape {y.shape} != prediction shape {yhat.shape}")
    if y.ndim != ndim:
        raise ValueError(f"{name}: expected {ndim}-D arrays, got {y.ndim}-D")
    if not np.isfinite(yhat).all() or not np.isfinite(y).all():
        raise ValueError(f"{name}: inputs contain NaN or Inf")


def _bce(y: np.ndarray, yhat: np.ndarray) -> float:
    p = np.clip(yhat, CLAMP_EPS, 1.0 - CLAMP_EPS)
    ll = y * np.log(p) + (1.0 - y) * np.log1p(-p)
    per_sample = ll.reshape(y.shape[0], -1).sum(axis=1)
    return float(-per_sample.mean())


def _bce_grad(y: np.ndarray, yhat: np.ndarray) -> np.ndarray:
    m = y.shape[0]
    p = np.clip(yhat, CLAMP_EPS, 1.0 - CLAMP_EPS)
    inside = (yhat > CLAMP_EPS) & (yhat < 1.0 - CLAMP_EPS)
    g = -(y / p - (1.0 - y) / (1.0 - p)) / m
    return np.where(inside, g, 0.0)


def loss_cls(y: np.ndarray, yhat: np.ndarray) -> float:
    """Mean over samples of the class-summed binary cross entropy."""
    y, yhat = np.asarray(y, dtype=float), np.asarray(yhat, dtype=float)
    _check_bce_inputs(y, yhat, 2, "loss_cls")
    return _bce(y, yhat)


def loss_cls_grad(y: np.ndarray, yhat: np.ndarray) -> np.ndarray:
    y, yhat = np.asarray(y, dtype=float), np.asarray(yhat, dtype=float)
    _check_bce_inputs(y, yhat, 2, "loss_cls")
    return _bce_grad(y, yhat)


def loss_seg(y: np.ndarray, yhat: np.ndarray) -> float:
    """Mean over samples of the pixel-summed binary cross entropy."""
    y, yhat = np.asarray(y, dtype=float), np.asarray(yhat, dtype=float)
    _check_bce_inputs(y, yhat, 3, "loss_seg")
    return _bce(y, yhat)


def loss_seg_grad(y: np.ndarray, yhat: np.ndarray) -> np.ndarray:
    y, yhat = np.asarray(y, dtype=float), np.asarray(yhat, dtype=float)
    _check_bce_inputs(y, yhat, 3, "loss_seg")
    return _bce_grad(y, yhat)


# ---------------------------------------------------------------------------
# detection regression


def _check_det_inputs(gt, pred: np.ndarray, matches) -> None:
    if pred.ndim != 3 or pred.shape[2] != 4:
        raise ValueError(f"loss_det: predictions must be (M, K, 4), got {pred.shape}")
    if not (len(gt) == pred.shape[0] == len(matches)):
        raise ValueError("loss_det: gt, predictions and matches disagree on sample count")
    for i, (bx, mm) in enumerate(zip(gt, matches)):
        if mm.matrix.shape != (pred.shape[1], len(bx)):
            raise ValueError(
                f"loss_det: sample {i} match matrix {mm.matrix.shape} does not fit "
                f"K={pred.shape[1]}, B={len(bx)}")


def loss_det(gt, pred: np.ndarray, matches) -> float:
    """Mean over samples of the summed squared error on matched
    (c_x, c_y, l, w) vectors; samples without matches contribute 0."""
    pred = np.asarray(pred, dtype=float)
    _check_det_inputs(gt, pred, matches)
    total = 0.0
    for i, (bx, mm) in enumerate(zip(gt, matches)):
        if mm.num_matches == 0:
            continue
        gt_arr = boxes_to_array(bx)
        for k, j in mm.pairs():
            diff = gt_arr[j] - pred[i, k]
            total += float(diff @ diff)
    return total / pred.shape[0]


def loss_det_grad(gt, pred: np.ndarray, matches) -> np.ndarray:
    pred = np.asarray(pred, dtype=float)
    _check_det_inputs(gt, pred, matches)
    g = np.zeros_like(pred)
    m = pred.shape[0]
    for i, (bx, mm) in enumerate(zip(gt, matches)):
        if mm.num_matches == 0:
            continue
        gt_arr = boxes_to_array(bx)
        for k, j in mm.pairs():
            g[i, k] = 2.0 * (pred[i, k] - gt_arr[j]) / m
    return g


# ---------------------------------------------------------------------------
# joint loss


def loss_total(losses, weights=(1.0, 1.0, 1.0)) -> float:
    """Weighted sum of (cls, det, seg) losses; default weights (1, 1, 1)."""
    losses = tuple(float(v) for v in losses)
    weights = tuple(float(v) for v in weights)
    if len(losses) != 3 or len(weights) != 3:
        raise ValueError("loss_total expects three losses and three weights")
    if not all(np.isfinite(v) for v in losses):
        raise ValueError(f"loss_total: non-finite loss in {losses}")
    return sum(w * v for w, v in zip(weights, losses))
