"""Datasets, labels and box geometry.

A sample is a grayscale image plus a LabelBundle holding any subset of
{class vector, box list, binary mask}. Boxes use normalized
(c_x, c_y, l, w) coordinates: centers as fractions of width/height,
l = vertical extent, w = horizontal extent. Pixel r (row) / c (column)
sits at coordinate (r, c) on the pixel-center grid, so a component
spanning pixel columns c0..c1 maps to c_x=(c0+c1)/2/W, w=(c1-c0+1)/W.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError

TASKS = ("cls", "det", "seg")

# 4-connectivity structuring element for component labelling
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8)


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class Box:
    """Axis-aligned box: normalized center (c_x, c_y) and extents (l, w)."""

    c_x: float
    c_y: float
    l: float
    w: float

    def __post_init__(self):
        for name in ("c_x", "c_y", "l", "w"):
            object.__setattr__(self, name, float(getattr(self, name)))

    def as_array(self) -> np.ndarray:
        return np.array([self.c_x, self.c_y, self.l, self.w])

    def corners(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) extents; may poke outside the unit square."""
        return (self.c_x - self.w / 2, self.c_y - self.l / 2,
                self.c_x + self.w / 2, self.c_y + self.l / 2)

    def area(self) -> float:
        return self.l * self.w

    def validate(self) -> None:
        vals = (self.c_x, self.c_y, self.l, self.w)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise DataError(f"box fields must be finite and non-negative, got {vals}")
        x0, y0, x1, y1 = self.corners()
        if min(x1, 1.0) <= max(x0, 0.0) or min(y1, 1.0) <= max(y0, 0.0):
            raise DataError(f"box clipped to the unit square is empty: {vals}")


def boxes_to_array(boxes) -> np.ndarray:
    """Stack boxes into a (B, 4) array in (c_x, c_y, l, w) order."""
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.stack([b.as_array() for b in boxes])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n,4) and (m,4) boxes in (c_x,c_y,l,w) form."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    ax0, ax1 = a[:, 0] - a[:, 3] / 2, a[:, 0] + a[:, 3] / 2
    ay0, ay1 = a[:, 1] - a[:, 2] / 2, a[:, 1] + a[:, 2] / 2
    bx0, bx1 = b[:, 0] - b[:, 3] / 2, b[:, 0] + b[:, 3] / 2
    by0, by1 = b[:, 1] - b[:, 2] / 2, b[:, 1] + b[:, 2] / 2
    ix = np.maximum(0.0, np.minimum(ax1[:, None], bx1[None, :]) - np.maximum(ax0[:, None], bx0[None, :]))
    iy = np.maximum(0.0, np.minimum(ay1[:, None], by1[None, :]) - np.maximum(ay0[:, None], by0[None, :]))
    inter = ix * iy
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou(a: Box, b: Box) -> float:
    return float(iou_matrix(a.as_array(), b.as_array())[0, 0])


def anchor_reference_boxes(d: int) -> np.ndarray:
    """(d*d, 4) reference boxes, one per grid cell, row-major (k = r*d + c)."""
    rs, cs = np.divmod(np.arange(d * d), d)
    out = np.empty((d * d, 4))
    out[:, 0] = (cs + 0.5) / d
    out[:, 1] = (rs + 0.5) / d
    out[:, 2] = 1.0 / d
    out[:, 3] = 1.0 / d
    return out


def _tight_box(r0: int, r1: int, c0: int, c1: int, h: int, w: int) -> Box:
    return Box(c_x=(c0 + c1) / 2 / w, c_y=(r0 + r1) / 2 / h,
               l=(r1 - r0 + 1) / h, w=(c1 - c0 + 1) / w)


def box_from_mask(mask: np.ndarray) -> list[Box]:
    """One tight box per 4-connected component of a binary mask."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"mask must be 2-D, got shape {mask.shape}")
    h, w = mask.shape
    labeled, n = ndimage.label(mask != 0, structure=_CROSS)
    boxes = []
    for sl in ndimage.find_objects(labeled):
        boxes.append(_tight_box(sl[0].start, sl[0].stop - 1,
                                sl[1].start, sl[1].stop - 1, h, w))
    return boxes


def rasterize_boxes(boxes, shape: tuple[int, int]) -> np.ndarray:
    """Fill boxes as solid rectangles on the pixel grid (inverse of _tight_box)."""
    h, w = shape
    mask = np.zeros(shape, dtype=np.uint8)
    for b in boxes:
        nr = int(round(b.l * h))
        nc = int(round(b.w * w))
        r0 = int(round(b.c_y * h - (nr - 1) / 2))
        c0 = int(round(b.c_x * w - (nc - 1) / 2))
        r0, c0 = max(r0, 0), max(c0, 0)
        mask[r0:min(r0 + nr, h), c0:min(c0 + nc, w)] = 1
    return mask


# ---------------------------------------------------------------------------
# samples and datasets


@dataclass
class ImageBatch:
    """M grayscale images, pixel values in [0, 1]."""

    pixels: np.ndarray  # (M, L, W)
    ids: list[str]

    def validate(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[0] < 1:
            raise DataError(f"image batch must be (M, L, W) with M >= 1, got {self.pixels.shape}")
        if len(self.ids) != self.pixels.shape[0]:
            raise DataError("ids and pixels disagree on batch size")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise DataError("pixel values must lie in [0, 1]")


@dataclass
class LabelBundle:
    """Per-image labels; None means the annotation kind is absent."""

    cls: np.ndarray | None = None      # (C,) of {0, 1}
    boxes: list[Box] | None = None     # [] means annotated-empty
    mask: np.ndarray | None = None     # (L, W) of {0, 1}

    def is_positive(self) -> bool:
        if self.cls is not None:
            return bool(np.any(self.cls > 0))
        if self.boxes is not None and len(self.boxes) > 0:
            return True
        return self.mask is not None and bool(np.any(self.mask))

    def check_consistent(self) -> None:
        """A non-empty mask or box set must be flagged positive in cls."""
        if self.cls is None:
            return
        positive = bool(np.any(self.cls > 0))
        if self.mask is not None and bool(np.any(self.mask)) and not positive:
            raise DataError("non-empty mask but cls marks no positive class")
        if self.boxes is not None and len(self.boxes) > 0 and not positive:
            raise DataError("non-empty box set but cls marks no positive class")


@dataclass
class Batch:
    """Dense view of a handful of samples, ready for the model and losses."""

    pixels: np.ndarray                 # (M, L, W)
    ids: list[str]
    cls: np.ndarray | None = None      # (M, C)
    boxes: list[list[Box]] | None = None
    masks: np.ndarray | None = None    # (M, L, W)

    @property
    def image_batch(self) -> ImageBatch:
        return ImageBatch(self.pixels, self.ids)

    def __len__(self) -> int:
        return self.pixels.shape[0]


class Dataset:
    """Ordered samples with a guaranteed annotation coverage."""

    def __init__(self, images: np.ndarray, ids: list[str], bundles: list[LabelBundle],
                 task_coverage, num_classes: int = 1):
        if images.ndim != 3:
            raise DataError(f"dataset images must be (M, L, W), got {images.shape}")
        if not (len(ids) == len(bundles) == images.shape[0]):
            raise DataError("images, ids and bundles disagree on sample count")
        self.images = images
        self.ids = list(ids)
        self.bundles = bundles
        self.task_coverage = frozenset(task_coverage)
        self.num_classes = num_classes
        for t in self.task_coverage:
            if t not in TASKS:
                raise DataError(f"unknown task {t!r} in coverage")
        self._check_coverage()

    def _check_coverage(self) -> None:
        for i, b in enumerate(self.bundles):
            if "cls" in self.task_coverage and b.cls is None:
                raise DataError(f"sample {i} missing cls labels promised by coverage")
            if "det" in self.task_coverage and b.boxes is None:
                raise DataError(f"sample {i} missing box labels promised by coverage")
            if "seg" in self.task_coverage and b.mask is None:
                raise DataError(f"sample {i} missing mask promised by coverage")

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> tuple[np.ndarray, LabelBundle]:
        return self.images[i], self.bundles[i]

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=int)
        return Dataset(self.images[indices], [self.ids[i] for i in indices],
                       [self.bundles[i] for i in indices], self.task_coverage,
                       self.num_classes)

    def positive_indices(self) -> np.ndarray:
        return np.array([i for i, b in enumerate(self.bundles) if b.is_positive()], dtype=int)

    def batch(self, indices) -> Batch:
        indices = np.asarray(indices, dtype=int)
        pixels = self.images[indices]
        ids = [self.ids[i] for i in indices]
        bundles = [self.bundles[i] for i in indices]
        cls = boxes = masks = None
        if "cls" in self.task_coverage:
            cls = np.stack([b.cls for b in bundles]).astype(float)
        if "det" in self.task_coverage:
            boxes = [list(b.boxes) for b in bundles]
        if "seg" in self.task_coverage:
            masks = np.stack([b.mask for b in bundles]).astype(float)
        return Batch(pixels, ids, cls, boxes, masks)

    def check_consistency(self) -> None:
        for b in self.bundles:
            b.check_consistent()


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the blob-image generator. All randomness hangs off seed."""

    image_size: tuple[int, int] = (64, 64)
    num_samples: int = 100
    positive_fraction: float = 0.5
    blob_count_range: tuple[int, int] = (1, 3)
    blob_radius_range: tuple[float, float] = (0.08, 0.18)
    noise_std: float = 0.05
    seed: int = 0
    background_level: float = 0.12
    blob_intensity: float = 0.85
    # new-disease surrogate: dark blobs on a bright background, stretched
    invert_contrast: bool = False
    eccentricity_range: tuple[float, float] = (0.55, 1.0)

    def validate(self) -> None:
        h, w = self.image_size
        if self.num_samples < 1:
            raise ConfigError("num_samples must be >= 1")
        if h < 8 or w < 8:
            raise ConfigError(f"degenerate image size {self.image_size}")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ConfigError("positive_fraction must lie in [0, 1]")
        lo, hi = self.blob_count_range
        if not 1 <= lo <= hi:
            raise ConfigError("blob_count_range must satisfy 1 <= min <= max")
        rlo, rhi = self.blob_radius_range
        if not 0.0 < rlo <= rhi < 0.5:
            raise ConfigError("blob_radius_range fractions must lie in (0, 0.5)")
        elo, ehi = self.eccentricity_range
        if not 0.0 < elo <= ehi <= 1.0:
            raise ConfigError("eccentricity_range must lie in (0, 1]")


def generate_synthetic(config: SyntheticConfig) -> Dataset:
    """Jointly-labeled blob images: each blob yields one mask component
    and one tight box; cls marks whether any blob is present."""
    config.validate()
    h, w = config.image_size
    rng = np.random.default_rng(config.seed)
    if config.invert_contrast:
        bg, blob_val = 1.0 - config.background_level, 1.0 - config.blob_intensity
    else:
        bg, blob_val = config.background_level, config.blob_intensity

    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    images = np.empty((config.num_samples, h, w))
    bundles = []
    for i in range(config.num_samples):
        img = bg + config.noise_std * rng.standard_normal((h, w))
        mask = np.zeros((h, w), dtype=np.uint8)
        boxes: list[Box] = []
        if rng.random() < config.positive_fraction:
            n_blobs = int(rng.integers(config.blob_count_range[0], config.blob_count_range[1] + 1))
            for _ in range(n_blobs):
                r_frac = rng.uniform(*config.blob_radius_range)
                ecc = rng.uniform(*config.eccentricity_range)
                ry = max(r_frac * h, 1.0)
                rx = max(r_frac * ecc * w, 1.0)
                if rng.random() < 0.5:
                    ry, rx = rx, ry
                cy = rng.uniform(ry, h - 1 - ry)
                cx = rng.uniform(rx, w - 1 - rx)
                blob = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
                level = blob_val + rng.uniform(-0.08, 0.08)
                img[blob] = level + config.noise_std * rng.standard_normal(int(blob.sum()))
                mask[blob] = 1
                rr, cc = np.nonzero(blob)
                boxes.append(_tight_box(rr.min(), rr.max(), cc.min(), cc.max(), h, w))
        images[i] = np.clip(img, 0.0, 1.0)
        cls = np.array([1.0 if boxes else 0.0])
        bundles.append(LabelBundle(cls=cls, boxes=boxes, mask=mask))
    ids = [f"img_{i:05d}" for i in range(config.num_samples)]
    return Dataset(images, ids, bundles, TASKS, num_classes=1)


# ---------------------------------------------------------------------------
# derived datasets


def derive_classification_labels(d: Dataset, source: str = "auto") -> Dataset:
    """Collapse box / mask annotations into a binary positive label."""
    if source == "auto":
        source = "det" if "det" in d.task_coverage else "seg"
    if source == "det" and "det" not in d.task_coverage:
        raise DataError("dataset has no box annotations to derive labels from")
    if source == "seg" and "seg" not in d.task_coverage:
        raise DataError("dataset has no masks to derive labels from")
    if source not in ("det", "seg"):
        raise DataError(f"unknown source {source!r}")
    bundles = []
    for b in d.bundles:
        if source == "det":
            pos = len(b.boxes) > 0
        else:
            pos = bool(np.any(b.mask))
        bundles.append(LabelBundle(cls=np.array([1.0 if pos else 0.0])))
    return Dataset(d.images, d.ids, bundles, {"cls"}, num_classes=1)


def ensure_joint(d: Dataset) -> Dataset:
    """Fill in missing label kinds so every bundle carries cls+det+seg.
    Boxes are fitted on the masks when absent; cls from positivity."""
    if "seg" not in d.task_coverage and "det" not in d.task_coverage:
        raise DataError("joint training needs at least mask or box annotations")
    bundles = []
    for b in d.bundles:
        boxes = b.boxes
        if boxes is None:
            if b.mask is None:
                raise DataError("cannot fit boxes: sample has no mask")
            boxes = box_from_mask(b.mask)
        mask = b.mask
        if mask is None:
            raise DataError("joint training needs masks; this dataset has none")
        cls = b.cls
        if cls is None:
            pos = len(boxes) > 0 or bool(np.any(mask))
            cls = np.array([1.0 if pos else 0.0])
        bundles.append(LabelBundle(cls=cls, boxes=list(boxes), mask=mask))
    return Dataset(d.images, d.ids, bundles, TASKS, num_classes=d.num_classes)


# ---------------------------------------------------------------------------
# on-disk layout


def save_dataset(d: Dataset, root) -> None:
    """Write the directory layout: images/, masks/, boxes.csv, classes.csv,
    manifest.json. Images are quantized to 8-bit grayscale."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    has_cls = "cls" in d.task_coverage
    has_det = "det" in d.task_coverage
    has_seg = "seg" in d.task_coverage
    if has_seg:
        (root / "masks").mkdir(exist_ok=True)
    for i, sid in enumerate(d.ids):
        img = np.round(d.images[i] * 255.0).astype(np.uint8)
        Image.fromarray(img, mode="L").save(root / "images" / f"{sid}.png")
        if has_seg:
            Image.fromarray(d.bundles[i].mask.astype(np.uint8) * 255, mode="L").save(
                root / "masks" / f"{sid}.png")
    if has_det:
        with open(root / "boxes.csv", "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["image_id", "c_x", "c_y", "l", "w"])
            for sid, b in zip(d.ids, d.bundles):
                for box in b.boxes:
                    wr.writerow([sid, repr(box.c_x), repr(box.c_y), repr(box.l), repr(box.w)])
    if has_cls:
        with open(root / "classes.csv", "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["image_id"] + [f"label_{c}" for c in range(d.num_classes)])
            for sid, b in zip(d.ids, d.bundles):
                wr.writerow([sid] + [int(v) for v in b.cls])
    manifest = {
        "image_size": list(d.image_size),
        "num_classes": d.num_classes,
        "annotations": [name for name, present in
                        [("classes", has_cls), ("boxes", has_det), ("masks", has_seg)] if present],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(root) -> Dataset:
    """Read a dataset directory back; coverage follows the manifest."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
        h, w = manifest["image_size"]
        num_classes = int(manifest["num_classes"])
        annotations = set(manifest["annotations"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed manifest {manifest_path}: {exc}") from exc

    image_dir = root / "images"
    if not image_dir.is_dir():
        raise DataError(f"missing images directory under {root}")
    ids = sorted(p.stem for p in image_dir.glob("*.png"))
    if not ids:
        raise DataError(f"no images found under {image_dir}")

    images = np.empty((len(ids), h, w))
    for i, sid in enumerate(ids):
        path = image_dir / f"{sid}.png"
        try:
            with Image.open(path) as im:
                im = im.convert("L")
                if im.size != (w, h):
                    im = im.resize((w, h), Image.BILINEAR)
                images[i] = np.asarray(im, dtype=np.float64) / 255.0
        except OSError as exc:
            raise DataError(f"unreadable image {path}: {exc}") from exc

    boxes_by_id: dict[str, list[Box]] = {sid: [] for sid in ids}
    if "boxes" in annotations:
        boxes_path = root / "boxes.csv"
        if not boxes_path.is_file():
            raise DataError(f"manifest promises boxes but {boxes_path} is missing")
        with open(boxes_path, newline="") as f:
            rd = csv.DictReader(f)
            for row in rd:
                sid = row["image_id"]
                if sid not in boxes_by_id:
                    raise DataError(f"boxes.csv references unknown image {sid!r}")
                fields = [row["c_x"], row["c_y"], row["l"], row["w"]]
                if all(v.strip() == "" for v in fields):
                    continue  # explicit empty row
                try:
                    cx, cy, bl, bw = (float(v) for v in fields)
                except ValueError as exc:
                    raise DataError(f"bad box row for {sid}: {exc}") from exc
                if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0 and 0.0 < bl <= 1.0 and 0.0 < bw <= 1.0):
                    raise DataError(
                        f"box for {sid} outside normalized [0,1] range: {(cx, cy, bl, bw)}")
                boxes_by_id[sid].append(Box(cx, cy, bl, bw))

    masks_by_id: dict[str, np.ndarray] = {}
    if "masks" in annotations:
        for sid in ids:
            path = root / "masks" / f"{sid}.png"
            if not path.is_file():
                raise DataError(f"manifest promises masks but {path} is missing")
            with Image.open(path) as im:
                im = im.convert("L")
                if im.size != (w, h):
                    im = im.resize((w, h), Image.NEAREST)
                arr = np.asarray(im)
            bad = ~np.isin(arr, (0, 255))
            if bad.any():
                raise DataError(f"mask {path} is not binary (values other than 0/255)")
            masks_by_id[sid] = (arr == 255).astype(np.uint8)

    cls_by_id: dict[str, np.ndarray] = {}
    if "classes" in annotations:
        cls_path = root / "classes.csv"
        if not cls_path.is_file():
            raise DataError(f"manifest promises classes but {cls_path} is missing")
        with open(cls_path, newline="") as f:
            rd = csv.DictReader(f)
            cols = [f"label_{c}" for c in range(num_classes)]
            for row in rd:
                sid = row["image_id"]
                try:
                    vec = np.array([float(row[c]) for c in cols])
                except (KeyError, TypeError, ValueError) as exc:
                    raise DataError(f"bad classes row for {sid}: {exc}") from exc
                if not np.isin(vec, (0.0, 1.0)).all():
                    raise DataError(f"class labels for {sid} must be 0/1")
                cls_by_id[sid] = vec
        missing = [sid for sid in ids if sid not in cls_by_id]
        if missing:
            raise DataError(f"classes.csv missing rows for {missing[:3]}...")

    coverage = set()
    if "classes" in annotations:
        coverage.add("cls")
    if "boxes" in annotations:
        coverage.add("det")
    if "masks" in annotations:
        coverage.add("seg")

    bundles = []
    for sid in ids:
        cls = cls_by_id.get(sid)
        boxes = boxes_by_id[sid] if "boxes" in annotations else None
        mask = masks_by_id.get(sid)
        if cls is None and (boxes is not None or mask is not None):
            # cls is derivable whenever boxes or masks are authoritative
            pos = (boxes is not None and len(boxes) > 0) or (mask is not None and bool(mask.any()))
            cls = np.array([1.0 if pos else 0.0])
        bundles.append(LabelBundle(cls=cls, boxes=boxes, mask=mask))
    if "cls" not in coverage and ({"boxes", "masks"} & annotations):
        coverage.add("cls")
    return Dataset(images, ids, bundles, coverage, num_classes=num_classes)
