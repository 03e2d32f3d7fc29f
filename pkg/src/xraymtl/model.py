"""The four differentiable blocks: shared encoder plus classification,
detection and segmentation heads.

The encoder is a chain of stride-2 3x3 conv blocks taking (M, L, W)
images to an (M, N, d, d) feature map. Heads:

* classification: global average pool -> hidden dense -> C sigmoids
* detection: 3x3 conv -> 1x1 conv to a (4, d, d) grid, ReLU, read out
  as K = d*d anchor slots in row-major cell order
* segmentation: stride-2 transposed-conv chain back to (L, W), sigmoid

Everything runs in float64. Forward passes are deterministic; there is
no separate train/eval mode (no batch-statistics layers). Backward
functions return per-group gradient dicts and consume caches produced
by the matching *_fwd call.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .data import ImageBatch, anchor_reference_boxes
from .errors import CheckpointError, ConfigError

LEAKY_SLOPE = 0.1
_PROB_EPS = 1e-12
_MAGIC = b"XRAYMTL1"

GROUPS = ("enc", "cls", "det", "seg")

_ENCODE_CALLS = 0


def encode_call_count() -> int:
    return _ENCODE_CALLS


def reset_encode_call_count() -> None:
    global _ENCODE_CALLS
    _ENCODE_CALLS = 0


# ---------------------------------------------------------------------------
# configuration and parameters


@dataclass(frozen=True)
class ArchConfig:
    """Static shape contract for the whole model."""

    input_size: tuple[int, int] = (64, 64)
    num_classes: int = 1
    encoded_dim: int = 8
    enc_channels: tuple[int, ...] = (16, 32, 48)
    cls_hidden: int = 32
    det_hidden: int = 48
    seg_channels: tuple[int, ...] = (32, 16, 8)
    max_gt_boxes: int = 8

    @property
    def depth(self) -> int:
        return len(self.enc_channels)

    @property
    def feature_maps(self) -> int:
        return self.enc_channels[-1]

    @property
    def anchors_per_image(self) -> int:
        return self.encoded_dim * self.encoded_dim

    def anchors(self) -> np.ndarray:
        return anchor_reference_boxes(self.encoded_dim)

    def validate(self) -> None:
        h, w = self.input_size
        if h != w:
            raise ConfigError(f"input must be square (encoded map is d x d), got {self.input_size}")
        if self.depth < 1:
            raise ConfigError("enc_channels must name at least one block")
        if h % (2 ** self.depth) != 0 or h // (2 ** self.depth) != self.encoded_dim:
            raise ConfigError(
                f"encoded_dim {self.encoded_dim} not reachable from input {h} "
                f"through {self.depth} stride-2 blocks")
        if self.encoded_dim < 1:
            raise ConfigError("encoded_dim must be >= 1")
        if len(self.seg_channels) != self.depth:
            raise ConfigError("seg_channels must have one entry per encoder block")
        if min(self.num_classes, self.cls_hidden, self.det_hidden, self.max_gt_boxes) < 1:
            raise ConfigError("num_classes, hidden widths and max_gt_boxes must be >= 1")
        if min(self.enc_channels) < 1 or min(self.seg_channels) < 1:
            raise ConfigError("channel counts must be >= 1")


@dataclass
class ModelParams:
    """Four disjoint named-array groups plus the architecture record."""

    enc: dict[str, np.ndarray]
    cls: dict[str, np.ndarray]
    det: dict[str, np.ndarray]
    seg: dict[str, np.ndarray]
    arch: ArchConfig

    def group(self, name: str) -> dict[str, np.ndarray]:
        return getattr(self, name)

    def flat(self) -> dict[tuple[str, str], np.ndarray]:
        return {(g, k): v for g in GROUPS for k, v in self.group(g).items()}

    def copy(self) -> "ModelParams":
        return ModelParams(
            enc={k: v.copy() for k, v in self.enc.items()},
            cls={k: v.copy() for k, v in self.cls.items()},
            det={k: v.copy() for k, v in self.det.items()},
            seg={k: v.copy() for k, v in self.seg.items()},
            arch=self.arch)

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.flat().values())


def init_params(arch: ArchConfig, seed: int, scheme: str = "scaled") -> ModelParams:
    """Seeded initialization. scheme='scaled' uses fan-in-scaled Gaussians;
    scheme='unit_normal' draws every parameter from N(0, 1)."""
    arch.validate()
    if scheme not in ("scaled", "unit_normal"):
        raise ConfigError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)

    def conv_w(co, ci, k):
        if scheme == "unit_normal":
            return rng.standard_normal((co, ci, k, k))
        return rng.standard_normal((co, ci, k, k)) * np.sqrt(2.0 / (ci * k * k))

    def convt_w(ci, co, k, stride):
        if scheme == "unit_normal":
            return rng.standard_normal((ci, co, k, k))
        fan = ci * k * k / (stride * stride)
        return rng.standard_normal((ci, co, k, k)) * np.sqrt(2.0 / fan)

    def dense_w(n_in, n_out):
        if scheme == "unit_normal":
            return rng.standard_normal((n_in, n_out))
        return rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)

    def bias(n, value=0.0):
        if scheme == "unit_normal":
            return rng.standard_normal(n)
        return np.full(n, value, dtype=np.float64)

    enc: dict[str, np.ndarray] = {}
    c_in = 1
    for i, c_out in enumerate(arch.enc_channels):
        enc[f"conv{i}_w"] = conv_w(c_out, c_in, 3)
        enc[f"conv{i}_b"] = bias(c_out)
        c_in = c_out

    n = arch.feature_maps
    cls = {
        "fc0_w": dense_w(n, arch.cls_hidden),
        "fc0_b": bias(arch.cls_hidden),
        "out_w": dense_w(arch.cls_hidden, arch.num_classes),
        "out_b": bias(arch.num_classes),
    }

    # +2 input channels: the cell-center coordinate grid; a plain conv is
    # translation-equivariant and could not regress absolute box centers.
    # Two 3x3 stages widen the receptive field past one grid cell.
    det = {
        "conv0_w": conv_w(arch.det_hidden, n + 2, 3),
        "conv0_b": bias(arch.det_hidden),
        "conv1_w": conv_w(arch.det_hidden, arch.det_hidden, 3),
        "conv1_b": bias(arch.det_hidden),
        # near-zero weights + a centered-box bias keep the ReLU output in
        # its linear region; a large spread here lets early updates push
        # pre-activations negative for good, killing the regression
        "out_w": (rng.standard_normal((4, arch.det_hidden, 1, 1))
                  * (1.0 if scheme == "unit_normal" else 0.01)),
        "out_b": (rng.standard_normal(4) if scheme == "unit_normal"
                  else np.array([0.5, 0.5, 0.25, 0.25])),
    }

    seg: dict[str, np.ndarray] = {}
    c_in = n
    for i, c_out in enumerate(arch.seg_channels):
        seg[f"convt{i}_w"] = convt_w(c_in, c_out, 4, 2)
        seg[f"convt{i}_b"] = bias(c_out)
        c_in = c_out
    seg["out_w"] = conv_w(1, c_in, 1)
    # masks are mostly background; bias the sigmoid off at start
    seg["out_b"] = bias(1, -2.0)

    return ModelParams(enc=enc, cls=cls, det=det, seg=seg, arch=arch)


# ---------------------------------------------------------------------------
# small layer helpers


def _lrelu(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, LEAKY_SLOPE * z)


def _lrelu_grad(z: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * np.where(z > 0, 1.0, LEAKY_SLOPE)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return np.clip(out, _PROB_EPS, 1.0 - _PROB_EPS)


# ---------------------------------------------------------------------------
# encoder


@dataclass
class EncodedFeatures:
    """Shared representation: (M, N, d, d)."""

    features: np.ndarray


def _encode_fwd(params: ModelParams, pixels: np.ndarray):
    global _ENCODE_CALLS
    _ENCODE_CALLS += 1
    arch = params.arch
    if pixels.ndim != 3 or pixels.shape[1:] != arch.input_size:
        raise ValueError(f"batch shape {pixels.shape} does not match input size {arch.input_size}")
    x = np.ascontiguousarray(pixels[:, None, :, :], dtype=np.float64)
    cache = {"inputs": [], "preacts": []}
    for i in range(arch.depth):
        cache["inputs"].append(x)
        z = kernels.conv2d_forward(x, params.enc[f"conv{i}_w"], params.enc[f"conv{i}_b"], 2, 1)
        cache["preacts"].append(z)
        x = _lrelu(z)
    return x, cache


def _enc_bwd(params: ModelParams, cache, dfeats: np.ndarray, need_dx: bool = False):
    grads: dict[str, np.ndarray] = {}
    d = dfeats
    for i in reversed(range(params.arch.depth)):
        dz = _lrelu_grad(cache["preacts"][i], d)
        dx, dw, db = kernels.conv2d_backward(
            cache["inputs"][i], params.enc[f"conv{i}_w"], dz, 2, 1,
            need_dx=(i > 0 or need_dx))
        grads[f"conv{i}_w"] = dw
        grads[f"conv{i}_b"] = db
        d = dx
    return grads, d


def encode(params: ModelParams, batch: ImageBatch) -> EncodedFeatures:
    """Run the shared encoder; deterministic for fixed params."""
    feats, _ = _encode_fwd(params, batch.pixels)
    return EncodedFeatures(feats)


# ---------------------------------------------------------------------------
# classification head


def _check_feats(params: ModelParams, feats: np.ndarray) -> None:
    arch = params.arch
    want = (arch.feature_maps, arch.encoded_dim, arch.encoded_dim)
    if feats.ndim != 4 or feats.shape[1:] != want:
        raise ValueError(f"encoded features shape {feats.shape} does not match arch {want}")


def _cls_fwd(params: ModelParams, feats: np.ndarray):
    _check_feats(params, feats)
    p = params.cls
    g = feats.mean(axis=(2, 3))
    z1 = g @ p["fc0_w"] + p["fc0_b"]
    h = _lrelu(z1)
    z2 = h @ p["out_w"] + p["out_b"]
    probs = _sigmoid(z2)
    return probs, {"feats_shape": feats.shape, "g": g, "z1": z1, "h": h, "probs": probs}


def _cls_bwd(params: ModelParams, cache, dprobs: np.ndarray):
    p = params.cls
    probs = cache["probs"]
    dz2 = dprobs * probs * (1.0 - probs)
    grads = {
        "out_w": cache["h"].T @ dz2,
        "out_b": dz2.sum(axis=0),
    }
    dh = dz2 @ p["out_w"].T
    dz1 = _lrelu_grad(cache["z1"], dh)
    grads["fc0_w"] = cache["g"].T @ dz1
    grads["fc0_b"] = dz1.sum(axis=0)
    dg = dz1 @ p["fc0_w"].T
    m, n, d, _ = cache["feats_shape"]
    dfeats = np.broadcast_to(dg[:, :, None, None] / (d * d), cache["feats_shape"]).copy()
    return grads, dfeats


def classify(params: ModelParams, enc: EncodedFeatures) -> np.ndarray:
    """Per-class sigmoid probabilities, (M, C), strictly inside (0, 1)."""
    probs, _ = _cls_fwd(params, enc.features)
    return probs


# ---------------------------------------------------------------------------
# detection head


def _coord_channels(d: int) -> np.ndarray:
    """(2, d, d) constant grid of cell-center coordinates (x then y)."""
    centers = (np.arange(d) + 0.5) / d
    return np.stack([np.broadcast_to(centers[None, :], (d, d)),
                     np.broadcast_to(centers[:, None], (d, d))])


def _det_fwd(params: ModelParams, feats: np.ndarray):
    _check_feats(params, feats)
    p = params.det
    m, _, d, _ = feats.shape
    coords = np.broadcast_to(_coord_channels(d)[None], (m, 2, d, d))
    x = np.ascontiguousarray(np.concatenate([feats, coords], axis=1))
    z0 = kernels.conv2d_forward(x, p["conv0_w"], p["conv0_b"], 1, 1)
    h0 = _lrelu(z0)
    z1 = kernels.conv2d_forward(h0, p["conv1_w"], p["conv1_b"], 1, 1)
    h1 = _lrelu(z1)
    z_out = kernels.conv2d_forward(h1, p["out_w"], p["out_b"], 1, 0)
    out = np.maximum(z_out, 0.0)
    pred = np.ascontiguousarray(out.transpose(0, 2, 3, 1)).reshape(m, d * d, 4)
    return pred, {"x": x, "z0": z0, "h0": h0, "z1": z1, "h1": h1, "z_out": z_out}


def _det_bwd(params: ModelParams, cache, dpred: np.ndarray):
    p = params.det
    m, k, _ = dpred.shape
    d = int(np.sqrt(k))
    dout = np.ascontiguousarray(dpred.reshape(m, d, d, 4).transpose(0, 3, 1, 2))
    dz_out = dout * (cache["z_out"] > 0)
    dh1, dw_out, db_out = kernels.conv2d_backward(cache["h1"], p["out_w"], dz_out, 1, 0)
    dz1 = _lrelu_grad(cache["z1"], dh1)
    dh0, dw1, db1 = kernels.conv2d_backward(cache["h0"], p["conv1_w"], dz1, 1, 1)
    dz0 = _lrelu_grad(cache["z0"], dh0)
    dx, dw0, db0 = kernels.conv2d_backward(cache["x"], p["conv0_w"], dz0, 1, 1)
    grads = {"conv0_w": dw0, "conv0_b": db0, "conv1_w": dw1, "conv1_b": db1,
             "out_w": dw_out, "out_b": db_out}
    # the coordinate channels are constants; only feature grads flow back
    return grads, np.ascontiguousarray(dx[:, :-2])


def detect(params: ModelParams, enc: EncodedFeatures) -> np.ndarray:
    """Anchor-slot box predictions, (M, K, 4), ReLU so all values >= 0.
    Slot k belongs to grid cell (k // d, k % d) regardless of input."""
    pred, _ = _det_fwd(params, enc.features)
    return pred


# ---------------------------------------------------------------------------
# segmentation head


def _seg_fwd(params: ModelParams, feats: np.ndarray):
    _check_feats(params, feats)
    arch = params.arch
    p = params.seg
    x = feats
    cache = {"inputs": [], "preacts": []}
    size = arch.encoded_dim
    for i in range(arch.depth):
        cache["inputs"].append(x)
        size *= 2
        z = kernels.convt2d_forward(x, p[f"convt{i}_w"], p[f"convt{i}_b"], 2, 1, size, size)
        cache["preacts"].append(z)
        x = _lrelu(z)
    cache["pre_out"] = x
    z_out = kernels.conv2d_forward(x, p["out_w"], p["out_b"], 1, 0)
    probs = _sigmoid(z_out)
    cache["probs"] = probs
    return probs[:, 0, :, :], cache


def _seg_bwd(params: ModelParams, cache, dmask: np.ndarray):
    p = params.seg
    probs = cache["probs"]
    dz_out = dmask[:, None, :, :] * probs * (1.0 - probs)
    dx, dw_out, db_out = kernels.conv2d_backward(cache["pre_out"], p["out_w"], dz_out, 1, 0)
    grads = {"out_w": dw_out, "out_b": db_out}
    d = dx
    for i in reversed(range(params.arch.depth)):
        dz = _lrelu_grad(cache["preacts"][i], d)
        da, dw, db = kernels.convt2d_backward(cache["inputs"][i], p[f"convt{i}_w"], dz, 2, 1)
        grads[f"convt{i}_w"] = dw
        grads[f"convt{i}_b"] = db
        d = da
    return grads, d


def segment(params: ModelParams, enc: EncodedFeatures) -> np.ndarray:
    """Per-pixel mask probabilities, (M, L, W), strictly inside (0, 1)."""
    probs, _ = _seg_fwd(params, enc.features)
    return probs


# ---------------------------------------------------------------------------
# checkpoint io: deterministic binary container (header JSON + raw bytes)


def save_params(params: ModelParams, path) -> None:
    path = Path(path)
    entries = []
    blobs = []
    for (g, k), arr in params.flat().items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        entries.append({"key": f"{g}/{k}", "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({"arch": asdict(params.arch), "arrays": entries},
                        sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for b in blobs:
            f.write(b)


def _arch_from_dict(d: dict) -> ArchConfig:
    return ArchConfig(
        input_size=tuple(d["input_size"]),
        num_classes=d["num_classes"],
        encoded_dim=d["encoded_dim"],
        enc_channels=tuple(d["enc_channels"]),
        cls_hidden=d["cls_hidden"],
        det_hidden=d["det_hidden"],
        seg_channels=tuple(d["seg_channels"]),
        max_gt_boxes=d["max_gt_boxes"])


def load_params(path, expect_arch: ArchConfig | None = None) -> ModelParams:
    """Read a checkpoint; rejects truncation and arch mismatches without
    returning partial parameters."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(_MAGIC) + 8 or raw[:len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path} is not a parameter checkpoint")
    hlen = int.from_bytes(raw[len(_MAGIC):len(_MAGIC) + 8], "little")
    off = len(_MAGIC) + 8
    if len(raw) < off + hlen:
        raise CheckpointError(f"{path} is truncated (header)")
    try:
        header = json.loads(raw[off:off + hlen].decode())
        arch = _arch_from_dict(header["arch"])
        entries = header["arrays"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path} has a corrupt header: {exc}") from exc
    if expect_arch is not None:
        def _norm(v):
            return list(v) if isinstance(v, (list, tuple)) else v
        want_d, got_d = asdict(expect_arch), asdict(arch)
        for fname in want_d:
            if _norm(got_d[fname]) != _norm(want_d[fname]):
                raise CheckpointError(
                    f"{path}: arch field {fname!r} is {got_d[fname]!r}, "
                    f"caller expects {want_d[fname]!r}")
    off += hlen
    groups: dict[str, dict[str, np.ndarray]] = {g: {} for g in GROUPS}
    for e in entries:
        shape = tuple(e["shape"])
        nbytes = int(np.prod(shape)) * 8
        if len(raw) < off + nbytes:
            raise CheckpointError(f"{path} is truncated (array {e['key']})")
        arr = np.frombuffer(raw[off:off + nbytes], dtype=np.float64).reshape(shape).copy()
        off += nbytes
        g, k = e["key"].split("/", 1)
        if g not in groups:
            raise CheckpointError(f"{path}: unknown parameter group {g!r}")
        groups[g][k] = arr
    if off != len(raw):
        raise CheckpointError(f"{path} has trailing bytes; refusing to load")
    return ModelParams(enc=groups["enc"], cls=groups["cls"], det=groups["det"],
                       seg=groups["seg"], arch=arch)
