"""Evaluation metrics and report generation.

Conventions, fixed here and documented rather than guessed:
accuracy is element-wise over all M*C binary decisions; F1 is
micro-averaged; DICE binarizes predictions at 0.5 and scores 1 when
both masks are empty; mAP is single-class average precision with
greedy max-IoU matching at a 0.5 threshold and all-point
interpolation; confidence intervals are nonparametric percentile
bootstrap over samples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, boxes_to_array, iou_matrix
from .errors import DataError
from .pipeline import DEFAULT_FILTER_THRESHOLD, infer_pipeline

MAP_IOU_THRESHOLD = 0.5


# ---------------------------------------------------------------------------
# scalar metrics


def _check_binary_pair(y, yhat, name):
    y, yhat = np.asarray(y, dtype=float), np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape:
        raise ValueError(f"{name}: shapes {y.shape} vs {yhat.shape} disagree")
    return y, yhat


def accuracy(y: np.ndarray, yhat: np.ndarray) -> float:
    """Fraction of correct entries over all M*C decisions."""
    y, yhat = _check_binary_pair(y, yhat, "accuracy")
    return float(np.mean((y > 0.5) == (yhat > 0.5)))


def f1(y: np.ndarray, yhat: np.ndarray) -> float:
    """Micro-averaged F1 over all class decisions; 1.0 when there is
    nothing to find and nothing was predicted."""
    y, yhat = _check_binary_pair(y, yhat, "f1")
    yb, pb = y > 0.5, yhat > 0.5
    tp = int(np.sum(yb & pb))
    fp = int(np.sum(~yb & pb))
    fn = int(np.sum(yb & ~pb))
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2.0 * tp / denom


def dice(y_mask: np.ndarray, yhat_mask: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|) with predictions binarized at 0.5; 1.0 when
    both masks are empty."""
    y, yhat = _check_binary_pair(y_mask, yhat_mask, "dice")
    a, b = y > 0.5, yhat > 0.5
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.sum(a & b)) / total


# ---------------------------------------------------------------------------
# mean average precision


def _rank_predictions(preds_per_image) -> list[tuple[float, int, int]]:
    """Global rank order: descending score, ties by image then slot."""
    flat = []
    for img, preds in enumerate(preds_per_image):
        for slot, (_box, score) in enumerate(preds):
            flat.append((float(score), img, slot))
    flat.sort(key=lambda t: (-t[0], t[1], t[2]))
    return flat


def _match_ranked(gt_per_image, preds_per_image, iou_threshold):
    """True-positive flags for the globally ranked prediction list."""
    gt_arrays = [boxes_to_array(g) for g in gt_per_image]
    taken = [np.zeros(len(g), dtype=bool) for g in gt_per_image]
    flags = []
    for _score, img, slot in _rank_predictions(preds_per_image):
        box, _ = preds_per_image[img][slot]
        g = gt_arrays[img]
        best_j, best_iou = -1, 0.0
        if g.shape[0]:
            ious = iou_matrix(box.as_array(), g)[0]
            for j in range(g.shape[0]):
                if not taken[img][j] and ious[j] > best_iou:
                    best_iou, best_j = float(ious[j]), j
        if best_j >= 0 and best_iou >= iou_threshold:
            taken[img][best_j] = True
            flags.append(1)
        else:
            flags.append(0)
    return np.array(flags, dtype=float)


def average_precision_from_flags(flags: np.ndarray, total_gt: int) -> float:
    """Area under the precision-recall curve (all-point interpolation)."""
    if total_gt == 0:
        return 1.0 if flags.size == 0 else 0.0
    if flags.size == 0:
        return 0.0
    tp_cum = np.cumsum(flags)
    rec = tp_cum / total_gt
    pre = tp_cum / np.arange(1, flags.size + 1)
    mrec = np.concatenate(([0.0], rec))
    mpre = np.concatenate(([0.0], pre))
    mpre = np.flip(np.maximum.accumulate(np.flip(mpre)))
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def mean_average_precision(gt_per_image, preds_per_image,
                           iou_threshold: float = MAP_IOU_THRESHOLD) -> float:
    """Single-class AP: rank all scored predictions, greedily match each
    to an unmatched ground truth in its image at IoU >= threshold."""
    if len(gt_per_image) != len(preds_per_image):
        raise ValueError("mean_average_precision: image counts disagree")
    flags = _match_ranked(gt_per_image, preds_per_image, iou_threshold)
    total_gt = sum(len(g) for g in gt_per_image)
    return average_precision_from_flags(flags, total_gt)


# ---------------------------------------------------------------------------
# bootstrap confidence intervals


def bootstrap_ci_stat(n_items: int, statistic, n_resamples: int = 1000,
                      alpha: float = 0.05, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap for an arbitrary statistic; the statistic
    receives an index array selecting the resampled items."""
    if n_items < 1:
        raise ValueError("bootstrap needs at least one sample")
    rng = np.random.default_rng(seed)
    stats = np.empty(n_resamples)
    for r in range(n_resamples):
        idx = rng.integers(0, n_items, size=n_items)
        stats[r] = statistic(idx)
    lo, hi = np.percentile(stats, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(lo), float(hi)


def bootstrap_ci(values, n_resamples: int = 1000, alpha: float = 0.05,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of per-sample values.
    The interval is widened, if needed, to contain the point estimate."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size < 1:
        raise ValueError("bootstrap_ci expects a non-empty 1-D value list")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, values.size, size=(n_resamples, values.size))
    means = values[idx].mean(axis=1)
    lo, hi = np.percentile(means, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    est = float(values.mean())
    return min(float(lo), est), max(float(hi), est)


# ---------------------------------------------------------------------------
# full evaluation


@dataclass
class MetricValue:
    estimate: float
    ci_low: float
    ci_high: float


@dataclass
class EvalReport:
    """Point estimates with 95% bootstrap intervals, one row per metric."""

    metrics: dict[str, MetricValue]
    n_samples: int
    seed: int
    dataset_id: str
    tasks: tuple[str, ...] = ()
    extra: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "tasks": list(self.tasks),
            "metrics": {k: {"estimate": v.estimate, "ci_low": v.ci_low, "ci_high": v.ci_high}
                        for k, v in self.metrics.items()},
            "extra": self.extra,
        }

    def to_text(self) -> str:
        names = list(self.metrics)
        width = max([len(n) for n in names] + [6])
        lines = [f"dataset: {self.dataset_id}  n={self.n_samples}  seed={self.seed}",
                 f"{'metric'.ljust(width)}  estimate  (95% CI)"]
        for n in names:
            v = self.metrics[n]
            lines.append(f"{n.ljust(width)}  {v.estimate:8.4f}  ({v.ci_low:.4f}, {v.ci_high:.4f})")
        return "\n".join(lines)

    def save(self, out_dir, stem: str = "eval_report") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(
            json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n")
        (out_dir / f"{stem}.txt").write_text(self.to_text() + "\n")


def evaluate(params, dataset: Dataset, tasks=("cls", "det", "seg"),
             threshold: float = DEFAULT_FILTER_THRESHOLD,
             iou_threshold: float = MAP_IOU_THRESHOLD,
             n_resamples: int = 1000, seed: int = 0,
             batch_size: int = 64, dataset_id: str = "") -> EvalReport:
    """Run the inference pipeline over a dataset and score every metric
    the task set and coverage allow."""
    tasks = tuple(t for t in ("cls", "det", "seg") if t in tasks)
    missing = [t for t in tasks if t not in dataset.task_coverage]
    if missing:
        raise DataError(f"evaluate: dataset lacks coverage for {missing}")
    n = len(dataset)
    diags = []
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        batch = dataset.batch(idx)
        diags.extend(infer_pipeline(params, batch.image_batch, threshold))

    metrics: dict[str, MetricValue] = {}
    gt_positive = np.array([b.is_positive() for b in dataset.bundles], dtype=float)
    pred_positive = np.array([d.positive for d in diags], dtype=float)
    correct = (gt_positive == pred_positive).astype(float)
    lo, hi = bootstrap_ci(correct, n_resamples, seed=seed + 11)
    metrics["filter_accuracy"] = MetricValue(float(correct.mean()), lo, hi)

    if "cls" in tasks:
        y = np.stack([b.cls for b in dataset.bundles]).astype(float)
        probs = np.stack([d.class_probs for d in diags])
        yhat = (probs >= 0.5).astype(float)
        per_sample_acc = ((y > 0.5) == (yhat > 0.5)).mean(axis=1)
        lo, hi = bootstrap_ci(per_sample_acc, n_resamples, seed=seed + 12)
        metrics["accuracy"] = MetricValue(accuracy(y, yhat), lo, hi)
        yb, pb = y > 0.5, yhat > 0.5
        counts = np.stack([(yb & pb).sum(axis=1), (~yb & pb).sum(axis=1),
                           (yb & ~pb).sum(axis=1)], axis=1).astype(float)

        def f1_stat(idx):
            tp, fp, fn = counts[idx].sum(axis=0)
            denom = 2 * tp + fp + fn
            return 1.0 if denom == 0 else 2.0 * tp / denom

        lo, hi = bootstrap_ci_stat(n, f1_stat, n_resamples, seed=seed + 13)
        est = f1(y, yhat)
        metrics["f1"] = MetricValue(est, min(lo, est), max(hi, est))

    if "seg" in tasks:
        h, w = dataset.image_size
        empty = np.zeros((h, w))
        per_dice = np.array([
            dice(dataset.bundles[i].mask, diags[i].mask if diags[i].mask is not None else empty)
            for i in range(n)])
        lo, hi = bootstrap_ci(per_dice, n_resamples, seed=seed + 14)
        metrics["dice"] = MetricValue(float(per_dice.mean()), lo, hi)
        pos = gt_positive > 0.5
        if pos.any():
            lo, hi = bootstrap_ci(per_dice[pos], n_resamples, seed=seed + 15)
            metrics["dice_positive"] = MetricValue(float(per_dice[pos].mean()), lo, hi)

    if "det" in tasks:
        gt_boxes = [list(b.boxes) for b in dataset.bundles]
        preds = [list(d.boxes) for d in diags]
        est = mean_average_precision(gt_boxes, preds, iou_threshold)

        # matching is per-image, so flags can be cached; only the global
        # score ranking changes across bootstrap resamples
        cached = []
        for i in range(n):
            order = sorted(range(len(preds[i])), key=lambda s: (-preds[i][s][1], s))
            scores_i = np.array([preds[i][s][1] for s in order])
            flags_i = _match_ranked([gt_boxes[i]], [preds[i]], iou_threshold)
            cached.append((scores_i, flags_i, len(gt_boxes[i])))

        def map_stat(idx):
            scores = np.concatenate([cached[i][0] for i in idx])
            flags = np.concatenate([cached[i][1] for i in idx])
            total_gt = sum(cached[i][2] for i in idx)
            if scores.size == 0:
                return 1.0 if total_gt == 0 else 0.0
            rank = np.argsort(-scores, kind="stable")
            return average_precision_from_flags(flags[rank], total_gt)

        lo, hi = bootstrap_ci_stat(n, map_stat, n_resamples, seed=seed + 16)
        metrics["map"] = MetricValue(est, min(lo, est), max(hi, est))

    return EvalReport(metrics=metrics, n_samples=n, seed=seed, dataset_id=dataset_id,
                      tasks=tasks)
