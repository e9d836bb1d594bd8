"""Run configuration: dataclasses with literal defaults, loaded from YAML.

A run config file has one mapping per section (``world``, ``noise``,
``pge``, ``la``, ``split``, ``ssod``, ``eval``) plus the top-level scalars
``T``, ``seed``, ``use_la`` and ``use_ssl``. Command-line overrides use
dotted keys (``world.seed=7``) and are applied after the file.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from w2n.errors import ConfigError

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).parent.parent / "config"
SPLIT_MODES = ("image", "instance", "two_tasks", "ideal")

# Short spellings accepted on the command line.
OVERRIDE_ALIASES = {"split_mode": "split.mode", "p": "split.p"}


def _check_unit(name: str, value: float, *, closed: bool = False) -> None:
    ok = 0.0 <= value <= 1.0 if closed else 0.0 < value < 1.0
    if not ok:
        bounds = "[0, 1]" if closed else "(0, 1)"
        raise ConfigError(f"{name} must lie in {bounds}, got {value}")


@dataclass
class WorldConfig:
    num_images: int = 40
    classes: int = 4
    objects_per_image: tuple[int, int] = (1, 3)
    canvas: tuple[float, float] = (100.0, 100.0)
    object_size: tuple[float, float] = (18.0, 40.0)
    part_fraction: float = 0.6
    part_classes: tuple[int, ...] = (0, 1)
    # Max part-center offset from the object center, as a fraction of object size.
    part_offset: float = 0.15
    proposals_per_image: int = 48
    gt_proposal_ratio: float = 0.35
    part_proposal_ratio: float = 0.15
    max_object_overlap: float = 0.3
    feature_dim: int = 24
    feature_noise: float = 0.6
    # Scale of the per-class overlap columns (object and part IoU).
    overlap_feature_scale: float = 3.0
    # Scale of the object-delta columns; zero below object_delta_min_iou.
    object_delta_scale: float = 8.0
    object_delta_min_iou: float = 0.45
    part_feature_scale: float = 3.0
    seed: int = 7

    @property
    def min_feature_dim(self) -> int:
        return 2 * self.classes + 12

    def __post_init__(self) -> None:
        if self.num_images < 1 or self.proposals_per_image < 1:
            raise ConfigError("num_images and proposals_per_image must be >= 1")
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        lo, hi = self.objects_per_image
        if lo < 1 or hi < lo:
            raise ConfigError(f"objects_per_image must be a range of counts >= 1, got {self.objects_per_image}")
        _check_unit("world.part_fraction", self.part_fraction)
        if not 0.0 <= self.part_offset < (1.0 - self.part_fraction) / 2:
            raise ConfigError("world.part_offset must keep the part strictly inside its object")
        if any(c < 0 or c >= self.classes for c in self.part_classes):
            raise ConfigError(f"world.part_classes out of range: {self.part_classes}")
        if self.gt_proposal_ratio + self.part_proposal_ratio > 1.0:
            raise ConfigError("world proposal ratios must sum to at most 1")
        if self.feature_dim < self.min_feature_dim:
            raise ConfigError(
                f"world.feature_dim must be >= {self.min_feature_dim} for {self.classes} classes"
            )
        if min(self.feature_noise, self.overlap_feature_scale, self.object_delta_scale, self.part_feature_scale) < 0:
            raise ConfigError("world feature noise and feature scales must be >= 0")
        _check_unit("world.object_delta_min_iou", self.object_delta_min_iou, closed=True)


@dataclass
class NoiseModel:
    part_rate: float = 0.45
    mislabel_rate: float = 0.1
    drop_rate: float = 0.05
    # Expected number of background false positives per image.
    fp_rate: float = 0.5
    accurate_score: tuple[float, float] = (0.6, 1.0)
    part_score: tuple[float, float] = (0.6, 1.0)
    mislabel_score: tuple[float, float] = (0.4, 0.9)
    fp_score: tuple[float, float] = (0.05, 0.5)

    def __post_init__(self) -> None:
        for name in ("part_rate", "mislabel_rate", "drop_rate"):
            _check_unit(f"noise.{name}", getattr(self, name), closed=True)
        if self.part_rate + self.mislabel_rate + self.drop_rate > 1.0 + 1e-12:
            raise ConfigError("noise part/mislabel/drop rates must sum to at most 1")
        if self.fp_rate < 0:
            raise ConfigError("noise.fp_rate must be >= 0")


@dataclass
class PgeConfig:
    t_nms: float = 0.3
    t_score: float = 0.2
    t_fusion: float = 0.4

    def __post_init__(self) -> None:
        for name in ("t_nms", "t_score", "t_fusion"):
            _check_unit(f"pge.{name}", getattr(self, name))


@dataclass
class LaConfig:
    tau_score: float = 0.1
    tau_assign: float = 0.5
    lambda_re: float = 0.1
    alpha: float = 0.05
    beta: float = 0.8
    # Steps before any outer box may be accepted.
    warmup_steps: int = 25
    steps: int = 300
    lr: float = 0.2
    log_every: int = 10

    def __post_init__(self) -> None:
        _check_unit("la.tau_score", self.tau_score)
        _check_unit("la.tau_assign", self.tau_assign)
        _check_unit("la.beta", self.beta, closed=True)
        if self.alpha < 0 or self.lambda_re < 0:
            raise ConfigError("la.alpha and la.lambda_re must be >= 0")
        if self.steps < 0 or self.warmup_steps < 0 or self.lr <= 0 or self.log_every < 1:
            raise ConfigError("la.steps >= 0, la.warmup_steps >= 0, la.lr > 0 and la.log_every >= 1 required")


@dataclass
class SplitConfig:
    mode: str = "two_tasks"
    p: float = 0.6
    tau_assign: float = 0.5

    def __post_init__(self) -> None:
        if self.mode not in SPLIT_MODES:
            raise ConfigError(f"split.mode must be one of {SPLIT_MODES}, got {self.mode!r}")
        if not 0.0 < self.p <= 1.0:
            raise ConfigError(f"split.p must lie in (0, 1], got {self.p}")


@dataclass
class SsodConfig:
    lambda_u: float = 2.0
    teacher_momentum: float = 0.996
    pseudo_score_threshold: float = 0.9
    jitter_samples: int = 10
    jitter_variance_threshold: float = 0.02
    jitter_shift: float = 0.06
    jitter_scale: tuple[float, float] = (0.94, 1.06)
    nms_threshold: float = 0.5
    tau_assign: float = 0.5
    # Bounded additive noise on student input features (stand-in for strong augmentation).
    feature_noise: float = 0.02
    labeled_batch: int = 8
    unlabeled_batch: int = 8
    steps: int = 300
    lr: float = 0.2

    def __post_init__(self) -> None:
        if self.lambda_u < 0:
            raise ConfigError("ssod.lambda_u must be >= 0")
        _check_unit("ssod.teacher_momentum", self.teacher_momentum, closed=True)
        _check_unit("ssod.pseudo_score_threshold", self.pseudo_score_threshold)
        _check_unit("ssod.jitter_variance_threshold", self.jitter_variance_threshold)
        if self.jitter_samples < 2:
            raise ConfigError("ssod.jitter_samples must be >= 2")
        if self.steps < 0 or self.lr <= 0:
            raise ConfigError("ssod.steps >= 0 and ssod.lr > 0 required")


@dataclass
class EvalConfig:
    test_images: int = 40
    iou_threshold: float = 0.5
    nms_threshold: float = 0.3
    max_detections: int = 100


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    noise: NoiseModel = field(default_factory=NoiseModel)
    pge: PgeConfig = field(default_factory=PgeConfig)
    la: LaConfig = field(default_factory=LaConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    ssod: SsodConfig = field(default_factory=SsodConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    T: int = 2
    seed: int = 7
    use_la: bool = True
    use_ssl: bool = True

    def __post_init__(self) -> None:
        if self.T < 0:
            raise ConfigError(f"T must be >= 0, got {self.T}")


SECTIONS: dict[str, type] = {
    "world": WorldConfig,
    "noise": NoiseModel,
    "pge": PgeConfig,
    "la": LaConfig,
    "split": SplitConfig,
    "ssod": SsodConfig,
    "eval": EvalConfig,
}
TOP_LEVEL_KEYS = ("T", "seed", "use_la", "use_ssl")


# ---------------------------------------------------------------------------
# Value coercion
# ---------------------------------------------------------------------------

def _coerce(key: str, value: Any, default: Any) -> Any:
    """Coerce a raw YAML/override value to the type of the field default."""
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise TypeError
            return tuple(_coerce(key, v, default[0]) if default else v for v in value)
        if isinstance(default, int):
            if isinstance(value, bool) or not float(value).is_integer():
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            out = float(value)
            if not math.isfinite(out):
                raise TypeError
            return out
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value for {key}: {value!r}") from None
    return value


def _build_section(name: str, raw: Any) -> Any:
    cls = SECTIONS[name]
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {name} must be a mapping")
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key: {name}.{key}")
        kwargs[key] = _coerce(f"{name}.{key}", value, getattr(defaults, key))
    return cls(**kwargs)


def run_config_from_dict(raw: dict[str, Any]) -> RunConfig:
    defaults = RunConfig()
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key in SECTIONS:
            kwargs[key] = _build_section(key, value)
        elif key in TOP_LEVEL_KEYS:
            kwargs[key] = _coerce(key, value, getattr(defaults, key))
        else:
            raise ConfigError(f"unknown config key: {key}")
    return RunConfig(**kwargs)


def run_config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    def plain(value: Any) -> Any:
        if isinstance(value, tuple):
            return [plain(v) for v in value]
        if isinstance(value, dict):
            return {k: plain(v) for k, v in value.items()}
        return value

    return plain(dataclasses.asdict(cfg))


# ---------------------------------------------------------------------------
# Overrides
# ---------------------------------------------------------------------------

def parse_override(text: str) -> tuple[str, Any]:
    """Split ``section.key=value`` into the canonical dotted key and a
    YAML-parsed value."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    key = OVERRIDE_ALIASES.get(key.strip(), key.strip())
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError:
        value = raw
    return key, value


def apply_overrides(raw: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    merged = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    for text in overrides:
        key, value = parse_override(text)
        parts = key.split(".")
        if len(parts) == 1:
            if parts[0] not in TOP_LEVEL_KEYS:
                raise ConfigError(f"unknown config key: {key}")
            merged[parts[0]] = value
        elif len(parts) == 2 and parts[0] in SECTIONS:
            section = merged.setdefault(parts[0], {}) or {}
            section[parts[1]] = value
            merged[parts[0]] = section
        else:
            raise ConfigError(f"unknown config key: {key}")
    return merged


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def resolve_config_path(name: str | Path) -> Path:
    """Accept a path, or a bare name looked up in the repository config dir."""
    path = Path(name)
    if path.exists():
        return path
    for candidate in (CONFIG_DIR / name, CONFIG_DIR / f"{name}.yaml"):
        if candidate.exists():
            return candidate
    raise ConfigError(f"config not found: {name}")


def load_run_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    raw: dict[str, Any] = {}
    if path is not None:
        resolved = resolve_config_path(path)
        try:
            with open(resolved) as f:
                raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {resolved} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {resolved} must hold a mapping")
        logger.info("Loaded run config from %s", resolved)
    cfg = run_config_from_dict(apply_overrides(raw, overrides or []))
    if overrides:
        logger.info("Applied %d config overrides", len(overrides))
    return cfg


def dump_run_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(run_config_to_dict(cfg), f, default_flow_style=False, sort_keys=False)
    return path
