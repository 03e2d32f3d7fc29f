"""One JSON configuration file covering architecture, training, the
phase protocol, synthetic data and evaluation; CLI flags override it.

Every hyperparameter that is a free choice (optimizer settings, step
budgets, thresholds, blob geometry) surfaces here with its default, and
the effective config is written next to every command's outputs so a
run can be reproduced from them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .model import ArchConfig
from .data import SyntheticConfig
from .pipeline import TeacherForcingConfig
from .train import ProtocolConfig, TrainConfig

_SECTIONS = ("arch", "train", "teacher_forcing", "protocol", "synthetic", "eval")


@dataclass(frozen=True)
class EvalConfig:
    n_resamples: int = 1000
    map_iou: float = 0.5
    batch_size: int = 64

    def validate(self) -> None:
        if self.n_resamples < 1 or self.batch_size < 1:
            raise ConfigError("eval n_resamples and batch_size must be >= 1")
        if not 0.0 < self.map_iou <= 1.0:
            raise ConfigError("eval map_iou must lie in (0, 1]")


@dataclass(frozen=True)
class RunConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def train(self) -> TrainConfig:
        return self.protocol.train

    def validate(self) -> None:
        self.arch.validate()
        self.protocol.validate()
        self.synthetic.validate()
        self.eval.validate()

    def to_json_dict(self) -> dict:
        train_d = asdict(self.protocol.train)
        tf_d = train_d.pop("teacher_forcing")
        train_d["freeze"] = sorted(self.protocol.train.freeze)
        proto_d = asdict(self.protocol)
        proto_d.pop("train")
        return {
            "arch": asdict(self.arch),
            "train": train_d,
            "teacher_forcing": tf_d,
            "protocol": proto_d,
            "synthetic": asdict(self.synthetic),
            "eval": asdict(self.eval),
        }


def _build(section: str, d: dict, cls, **extra):
    try:
        return cls(**d, **extra)
    except TypeError as exc:
        raise ConfigError(f"bad [{section}] section: {exc}") from exc


def _tupled(d: dict, keys) -> dict:
    out = dict(d)
    for k in keys:
        if k in out and isinstance(out[k], list):
            out[k] = tuple(out[k])
    return out


def config_from_dict(raw: dict) -> RunConfig:
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    arch_d = _tupled(raw.get("arch", {}), ("input_size", "enc_channels", "seg_channels"))
    arch = _build("arch", arch_d, ArchConfig)
    tf = _build("teacher_forcing", raw.get("teacher_forcing", {}), TeacherForcingConfig)
    train_d = _tupled(raw.get("train", {}), ("loss_weights",))
    freeze = frozenset(train_d.pop("freeze", ()))
    train = _build("train", train_d, TrainConfig, teacher_forcing=tf, freeze=freeze)
    protocol = _build("protocol", raw.get("protocol", {}), ProtocolConfig, train=train)
    synth_d = _tupled(raw.get("synthetic", {}),
                      ("image_size", "blob_count_range", "blob_radius_range", "eccentricity_range"))
    synthetic = _build("synthetic", synth_d, SyntheticConfig)
    eval_cfg = _build("eval", raw.get("eval", {}), EvalConfig)
    cfg = RunConfig(arch=arch, protocol=protocol, synthetic=synthetic, eval=eval_cfg)
    cfg.validate()
    return cfg


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply 'section.key=value' overrides; values parse as JSON, falling
    back to plain strings."""
    for k, v in raw.items():
        if not isinstance(v, dict):
            raise ConfigError(f"config section {k!r} must be a JSON object")
    out = {k: dict(v) for k, v in raw.items()}
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"override names unknown section {section!r}")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        out.setdefault(section, {})[key] = parsed
    return out


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {p} must hold a JSON object")
    raw = apply_overrides(raw, overrides or [])
    return config_from_dict(raw)


def write_effective_config(cfg: RunConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "effective_config.json"
    path.write_text(json.dumps(cfg.to_json_dict(), indent=2, sort_keys=True) + "\n")
    return path
