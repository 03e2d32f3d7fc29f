"""Independent reference implementations the package is checked against.

Everything here is deliberately written as plain loops (and exact
rational arithmetic where it matters), sharing no code with the
package's vectorized paths.
"""

import math
from fractions import Fraction
from itertools import accumulate

import numpy as np

from xraymtl.data import Box
from xraymtl.train import forward_losses


# ---------------------------------------------------------------------------
# binary cross entropy, scalar loop


def bce_loop(y, yhat, eps=1e-7):
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    total = 0.0
    for i in range(y.shape[0]):
        for ty, tp in zip(np.ravel(y[i]), np.ravel(yhat[i])):
            p = min(max(tp, eps), 1.0 - eps)
            total -= ty * math.log(p) + (1.0 - ty) * math.log(1.0 - p)
    return total / y.shape[0]


# ---------------------------------------------------------------------------
# connected components, BFS flood fill + min/max scan


def cc_boxes_loop(mask):
    mask = np.asarray(mask)
    h, w = mask.shape
    seen = np.zeros((h, w), dtype=bool)
    boxes = []
    for r0 in range(h):
        for c0 in range(w):
            if not mask[r0, c0] or seen[r0, c0]:
                continue
            stack = [(r0, c0)]
            seen[r0, c0] = True
            rows, cols = [], []
            while stack:
                r, c = stack.pop()
                rows.append(r)
                cols.append(c)
                for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not seen[rr, cc]:
                        seen[rr, cc] = True
                        stack.append((rr, cc))
            rmin, rmax = min(rows), max(rows)
            cmin, cmax = min(cols), max(cols)
            boxes.append(Box(c_x=(cmin + cmax) / 2 / w, c_y=(rmin + rmax) / 2 / h,
                             l=(rmax - rmin + 1) / h, w=(cmax - cmin + 1) / w))
    return boxes


# ---------------------------------------------------------------------------
# exact-rational IoU, matching and average precision


def iou_fraction(a: Box, b: Box) -> Fraction:
    ax0 = Fraction(a.c_x) - Fraction(a.w) / 2
    ax1 = Fraction(a.c_x) + Fraction(a.w) / 2
    ay0 = Fraction(a.c_y) - Fraction(a.l) / 2
    ay1 = Fraction(a.c_y) + Fraction(a.l) / 2
    bx0 = Fraction(b.c_x) - Fraction(b.w) / 2
    bx1 = Fraction(b.c_x) + Fraction(b.w) / 2
    by0 = Fraction(b.c_y) - Fraction(b.l) / 2
    by1 = Fraction(b.c_y) + Fraction(b.l) / 2
    ix = max(Fraction(0), min(ax1, bx1) - max(ax0, bx0))
    iy = max(Fraction(0), min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    union = Fraction(a.l) * Fraction(a.w) + Fraction(b.l) * Fraction(b.w) - inter
    return inter / union if union > 0 else Fraction(0)


def map_flags_oracle(gt_per_image, preds_per_image, thr):
    """True-positive flags under the documented rule, recomputed with
    exact rational IoU: rank by (-score, image, slot); each prediction
    matches the highest-IoU unmatched ground truth at IoU >= thr, ties
    toward the lowest index."""
    ranked = []
    for img, preds in enumerate(preds_per_image):
        for slot, (_box, score) in enumerate(preds):
            ranked.append((float(score), img, slot))
    ranked.sort(key=lambda t: (-t[0], t[1], t[2]))
    taken = [set() for _ in gt_per_image]
    thr_f = Fraction(thr)
    flags = []
    for _score, img, slot in ranked:
        box = preds_per_image[img][slot][0]
        best_j, best_iou = -1, Fraction(0)
        for j, g in enumerate(gt_per_image[img]):
            if j in taken[img]:
                continue
            v = iou_fraction(box, g)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= thr_f:
            taken[img].add(best_j)
            flags.append(1)
        else:
            flags.append(0)
    return flags


def rank_consistent_flagsets(gt_per_image, preds_per_image, thr):
    """All TP-flag sequences any rank-consistent matcher could produce
    (each prediction, in rank order, matches some qualifying unmatched
    ground truth when one exists)."""
    ranked = []
    for img, preds in enumerate(preds_per_image):
        for slot, (_box, score) in enumerate(preds):
            ranked.append((float(score), img, slot))
    ranked.sort(key=lambda t: (-t[0], t[1], t[2]))
    thr_f = Fraction(thr)
    results = set()

    def rec(pos, taken, flags):
        if pos == len(ranked):
            results.add(tuple(flags))
            return
        _score, img, slot = ranked[pos]
        box = preds_per_image[img][slot][0]
        options = [j for j, g in enumerate(gt_per_image[img])
                   if j not in taken[img] and iou_fraction(box, g) >= thr_f]
        if not options:
            rec(pos + 1, taken, flags + [0])
            return
        for j in options:
            taken[img].add(j)
            rec(pos + 1, taken, flags + [1])
            taken[img].remove(j)

    rec(0, [set() for _ in gt_per_image], [])
    return results


def ap_fraction(flags, total_gt) -> float:
    """All-point-interpolated AP from TP flags, exact rational arithmetic."""
    if total_gt == 0:
        return 1.0 if len(flags) == 0 else 0.0
    if len(flags) == 0:
        return 0.0
    tp_cum = list(accumulate(flags))
    precs = [Fraction(tp_cum[i], i + 1) for i in range(len(flags))]
    suffix = list(precs)
    for i in range(len(suffix) - 2, -1, -1):
        suffix[i] = max(suffix[i], suffix[i + 1])
    ap = Fraction(0)
    for i, f in enumerate(flags):
        if f:
            ap += Fraction(1, total_gt) * suffix[i]
    return float(ap)


# ---------------------------------------------------------------------------
# greedy anchor matching, plain python scalar loops
#
# IoU here mirrors the package's float64 expression order on purpose: the
# tie-break contract is defined over the implementation's arithmetic, and
# exact rational IoU would resolve ties float64 cannot see.


def iou_scalar(a: Box, b: Box) -> float:
    ix = max(0.0, min(a.c_x + a.w / 2, b.c_x + b.w / 2) - max(a.c_x - a.w / 2, b.c_x - b.w / 2))
    iy = max(0.0, min(a.c_y + a.l / 2, b.c_y + b.l / 2) - max(a.c_y - a.l / 2, b.c_y - b.l / 2))
    inter = ix * iy
    union = a.l * a.w + b.l * b.w - inter
    return inter / union if union > 0 else 0.0


def match_anchors_loop(gt_boxes, anchors, thr):
    anchors = [Box(*row) for row in np.asarray(anchors)]
    gts = [b if isinstance(b, Box) else Box(*b) for b in gt_boxes]
    ious = [[iou_scalar(a, g) for g in gts] for a in anchors]
    best = [max((ious[k][j] for k in range(len(anchors))), default=0.0)
            for j in range(len(gts))]
    order = sorted(range(len(gts)), key=lambda j: (-best[j], j))
    claimed = set()
    mat = np.zeros((len(anchors), len(gts)), dtype=np.uint8)
    for j in order:
        best_k, best_v = -1, -1.0
        for k in range(len(anchors)):
            if k in claimed:
                continue
            if ious[k][j] > best_v:
                best_v, best_k = ious[k][j], k
        if best_k >= 0 and best_v >= thr:
            mat[best_k, j] = 1
            claimed.add(best_k)
    return mat


# ---------------------------------------------------------------------------
# finite-difference gradients through the whole model


def finite_diff_grads(params, batch, active, cfg, h=1e-5, keys=None):
    flat = params.flat()
    out = {}
    for key in (keys if keys is not None else flat):
        arr = flat[key]
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            ix = it.multi_index
            orig = arr[ix]
            arr[ix] = orig + h
            lp = forward_losses(params, batch, active, cfg)["total"]
            arr[ix] = orig - h
            lm = forward_losses(params, batch, active, cfg)["total"]
            arr[ix] = orig
            g[ix] = (lp - lm) / (2.0 * h)
            it.iternext()
        out[key] = g
    return out


def max_rel_error(analytic: dict, numeric: dict, floor=1e-6) -> float:
    worst = 0.0
    for key, fd in numeric.items():
        a = analytic.get(key, np.zeros_like(fd))
        denom = np.maximum(np.abs(a) + np.abs(fd), floor)
        worst = max(worst, float(np.max(np.abs(a - fd) / denom)))
    return worst
