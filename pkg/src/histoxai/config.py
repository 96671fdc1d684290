"""Experiment configuration.

A single YAML file describes a run. Every tunable default of the toolkit is
declared once in the dataclasses below; the other modules import these types
rather than repeating the numbers.

Example (everything except ``dataset.root`` is optional)::

    seed: 0
    output_dir: runs
    dataset:
      root: /data/lung_colon_image_set
    model:
      backbone: Xception

Seeds: the global ``seed`` fans out to per-module seeds through
:func:`derive_seed`, so one integer reproduces a whole run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml

from .errors import ConfigError

SCHEMA_VERSION = 1

# Epoch budget per backbone; learning rate 0.001, batch size 10 and Adam for all.
BACKBONE_EPOCHS: dict[str, int] = {
    "Xception": 30,
    "DenseNet201": 25,
    "ResNet101": 35,
    "InceptionV3": 25,
    "DenseNet121": 30,
    "DenseNet169": 35,
    "ResNet152": 35,
    "InceptionResNetV2": 40,
}
TEST_BACKBONE = "TinyTestNet"
TEST_BACKBONE_EPOCHS = 10

ATTRIBUTION_METHODS: tuple[str, ...] = (
    "gradcam",
    "gradcam_pp",
    "scorecam",
    "faster_scorecam",
    "layercam",
    "vanilla_saliency",
    "smoothgrad",
)

OUTPUT_DIR_ENV = "HISTOXAI_OUTPUT_DIR"


def derive_seed(seed: int, *keys: Any) -> int:
    """Derive a child seed from ``seed`` and a path of keys.

    The derivation is ``sha256(json([seed, *keys]))`` truncated to 63 bits, so
    it is stable across processes and Python versions (unlike ``hash``).
    """
    payload = json.dumps([int(seed), *keys], separators=(",", ":"), default=str)
    digest = hashlib.sha256(payload.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF


@dataclass(frozen=True)
class DatasetConfig:
    root: Optional[str] = None
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    # Number of class folders expected under root.
    num_classes: int = 5
    # Optional subset of class folder names, e.g. the three lung classes.
    classes: Optional[tuple[str, ...]] = None
    scan_workers: int = 4


@dataclass(frozen=True)
class AugmentationPolicy:
    """Train-time augmentation. All flags off is the identity transform."""

    rotation: bool = True
    hflip: bool = True
    crop: bool = True
    brightness: bool = True
    contrast: bool = True
    rotation_max_deg: float = 15.0
    hflip_prob: float = 0.5
    crop_fraction: float = 0.9
    brightness_delta_max: float = 0.1
    contrast_range: tuple[float, float] = (0.8, 1.2)
    # None means "derive from the global seed" at load time.
    seed: Optional[int] = None

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentationPolicy":
        return cls(rotation=False, hflip=False, crop=False, brightness=False, contrast=False, seed=seed)


@dataclass(frozen=True)
class PreprocessConfig:
    input_size: tuple[int, int] = (299, 299)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "Xception"
    pretrained: bool = True
    # Local state_dict for the backbone, used instead of downloading.
    weights_path: Optional[str] = None
    freeze_backbone: bool = False
    init_seed: Optional[int] = None


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 0.001
    lr_floor: float = 0.0001
    batch_size: int = 10
    # None means "take the per-backbone epoch budget".
    epochs: Optional[int] = None
    optimizer: Literal["adam"] = "adam"
    scheduler: Literal["plateau", "constant"] = "plateau"
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    seed: Optional[int] = None


@dataclass(frozen=True)
class EvaluationConfig:
    averaging: Literal["weighted", "macro", "micro"] = "weighted"
    batch_size: int = 32
    confusion_image_size: int = 480


@dataclass(frozen=True)
class SmoothGradParams:
    n_samples: int = 25
    noise_sigma: float = 0.15
    seed: Optional[int] = None


@dataclass(frozen=True)
class AttributionConfig:
    methods: tuple[str, ...] = ATTRIBUTION_METHODS
    target_class: Union[int, str] = "predicted"
    # None means the model's auto-resolved target layer.
    layer: Optional[str] = None
    saliency_reduction: Literal["max_abs", "mean_abs"] = "max_abs"
    smoothgrad: SmoothGradParams = field(default_factory=SmoothGradParams)
    faster_scorecam_top_k: int = 10
    scorecam_batch_size: int = 32
    scorecam_baseline: Literal["zero", "blur"] = "zero"


@dataclass(frozen=True)
class OverlaySpec:
    colormap: Literal["jet", "viridis", "grayscale"] = "jet"
    alpha: float = 0.4
    annotate_method: bool = True
    annotate_class: bool = True
    annotate_probability: bool = True
    tile_size: int = 299
    grid_columns: int = 4


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    output_dir: str = "runs"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: HyperParams = field(default_factory=HyperParams)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    visualization: OverlaySpec = field(default_factory=OverlaySpec)

    def seed_for(self, module: str, *keys: Any) -> int:
        return derive_seed(self.seed, module, *keys)


# ---------------------------------------------------------------------------
# dict -> dataclass conversion
# ---------------------------------------------------------------------------


def _is_optional(tp: Any) -> bool:
    return typing.get_origin(tp) in (Union, types.UnionType) and type(None) in typing.get_args(tp)


def _convert(value: Any, tp: Any, where: str, problems: list[str]) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)

    if is_dataclass(tp):
        if not isinstance(value, dict):
            problems.append(f"{where}: expected a section (mapping), got {type(value).__name__}")
            return tp()
        return _build(tp, value, where, problems)

    if origin in (Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        options = [a for a in args if a is not type(None)]
        # bool is an int subclass; only accept it where bool is declared.
        for option in options:
            if option is int and isinstance(value, int) and not isinstance(value, bool):
                return value
            if option is str and isinstance(value, str):
                return value
        if len(options) == 1:
            return _convert(value, options[0], where, problems)
        problems.append(f"{where}: expected one of {[getattr(o, '__name__', o) for o in options]}, got {value!r}")
        return None

    if origin is Literal:
        if value not in args:
            problems.append(f"{where}: {value!r} not in {list(args)}")
        return value

    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            problems.append(f"{where}: expected a list, got {value!r}")
            return ()
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(v, args[0], f"{where}[{i}]", problems) for i, v in enumerate(value))
        if len(value) != len(args):
            problems.append(f"{where}: expected {len(args)} values, got {len(value)}")
            return tuple(value)
        return tuple(_convert(v, a, f"{where}[{i}]", problems) for i, (v, a) in enumerate(zip(value, args)))

    if tp is bool:
        if not isinstance(value, bool):
            problems.append(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{where}: expected a number, got {value!r}")
            return value
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            problems.append(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls: type, data: dict, where: str, problems: list[str]) -> Any:
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            section = where or "<top level>"
            problems.append(f"unknown key {key!r} in section {section!r}")
    kwargs = {}
    for f in fields(cls):
        if f.name in data:
            path = f"{where}.{f.name}" if where else f.name
            kwargs[f.name] = _convert(data[f.name], hints[f.name], path, problems)
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def _check(problems: list[str], ok: bool, message: str) -> None:
    if not ok:
        problems.append(message)


def _validate(cfg: ExperimentConfig) -> list[str]:
    p: list[str] = []
    _check(p, cfg.schema_version == SCHEMA_VERSION,
           f"schema_version: file has {cfg.schema_version}, this toolkit reads {SCHEMA_VERSION}")

    d = cfg.dataset
    fr = d.split_fractions
    if len(fr) == 3 and all(isinstance(x, float) for x in fr):
        _check(p, all(x >= 0 for x in fr), f"dataset.split_fractions: must be >= 0, got {list(fr)}")
        _check(p, abs(sum(fr) - 1.0) <= 1e-9, f"dataset.split_fractions: must sum to 1, got {sum(fr)}")
    _check(p, isinstance(d.num_classes, int) and d.num_classes >= 2, "dataset.num_classes: must be >= 2")
    _check(p, isinstance(d.scan_workers, int) and d.scan_workers >= 1, "dataset.scan_workers: must be >= 1")
    if d.classes is not None:
        _check(p, len(d.classes) >= 2, "dataset.classes: need at least 2 class names")
        _check(p, len(set(d.classes)) == len(d.classes), "dataset.classes: duplicate names")

    size = cfg.preprocess.input_size
    _check(p, all(isinstance(s, int) and s > 0 for s in size), f"preprocess.input_size: must be > 0, got {list(size)}")
    a = cfg.preprocess.augmentation
    _check(p, _num(a.rotation_max_deg) and a.rotation_max_deg >= 0,
           f"preprocess.augmentation.rotation_max_deg: must be >= 0, got {a.rotation_max_deg}")
    _check(p, _num(a.hflip_prob) and 0 <= a.hflip_prob <= 1,
           f"preprocess.augmentation.hflip_prob: must be in [0, 1], got {a.hflip_prob}")
    _check(p, _num(a.crop_fraction) and 0 < a.crop_fraction <= 1,
           f"preprocess.augmentation.crop_fraction: must be in (0, 1], got {a.crop_fraction}")
    _check(p, _num(a.brightness_delta_max) and a.brightness_delta_max >= 0,
           f"preprocess.augmentation.brightness_delta_max: must be >= 0, got {a.brightness_delta_max}")
    lo, hi = (a.contrast_range + (0.0, 0.0))[:2]
    _check(p, _num(lo) and _num(hi) and 0 <= lo <= hi,
           f"preprocess.augmentation.contrast_range: need 0 <= low <= high, got {list(a.contrast_range)}")

    m = cfg.model
    from .models import ALL_BACKBONES  # local import: models pulls in torch

    _check(p, m.backbone in ALL_BACKBONES,
           f"model.backbone: unknown backbone {m.backbone!r}; valid names: {', '.join(ALL_BACKBONES)}")

    t = cfg.training
    _check(p, _num(t.lr_floor) and t.lr_floor > 0, f"training.lr_floor: must be > 0, got {t.lr_floor}")
    _check(p, _num(t.learning_rate) and _num(t.lr_floor) and t.learning_rate >= t.lr_floor,
           f"training.learning_rate: must be >= lr_floor ({t.lr_floor}), got {t.learning_rate}")
    _check(p, isinstance(t.batch_size, int) and t.batch_size >= 1,
           f"training.batch_size: must be >= 1, got {t.batch_size}")
    _check(p, t.epochs is None or (isinstance(t.epochs, int) and t.epochs >= 1),
           f"training.epochs: must be >= 1, got {t.epochs}")
    _check(p, _num(t.plateau_factor) and 0 < t.plateau_factor < 1,
           f"training.plateau_factor: must be in (0, 1), got {t.plateau_factor}")
    _check(p, isinstance(t.plateau_patience, int) and t.plateau_patience >= 0,
           f"training.plateau_patience: must be >= 0, got {t.plateau_patience}")

    e = cfg.evaluation
    _check(p, isinstance(e.batch_size, int) and e.batch_size >= 1, "evaluation.batch_size: must be >= 1")
    _check(p, isinstance(e.confusion_image_size, int) and e.confusion_image_size >= 64,
           "evaluation.confusion_image_size: must be >= 64")

    at = cfg.attribution
    for name in at.methods:
        _check(p, name in ATTRIBUTION_METHODS,
               f"attribution.methods: unknown method {name!r}; valid names: {', '.join(ATTRIBUTION_METHODS)}")
    _check(p, len(at.methods) >= 1, "attribution.methods: need at least one method")
    if isinstance(at.target_class, str):
        pass  # "predicted" or a class name, resolved against the model
    else:
        _check(p, at.target_class is not None and at.target_class >= 0, "attribution.target_class: must be >= 0")
    sg = at.smoothgrad
    _check(p, isinstance(sg.n_samples, int) and sg.n_samples >= 1, "attribution.smoothgrad.n_samples: must be >= 1")
    _check(p, _num(sg.noise_sigma) and sg.noise_sigma >= 0, "attribution.smoothgrad.noise_sigma: must be >= 0")
    _check(p, isinstance(at.faster_scorecam_top_k, int) and at.faster_scorecam_top_k >= 1,
           "attribution.faster_scorecam_top_k: must be >= 1")
    _check(p, isinstance(at.scorecam_batch_size, int) and at.scorecam_batch_size >= 1,
           "attribution.scorecam_batch_size: must be >= 1")

    v = cfg.visualization
    _check(p, _num(v.alpha) and 0 <= v.alpha <= 1, f"visualization.alpha: must be in [0, 1], got {v.alpha}")
    _check(p, isinstance(v.tile_size, int) and v.tile_size >= 16, "visualization.tile_size: must be >= 16")
    _check(p, isinstance(v.grid_columns, int) and v.grid_columns >= 1, "visualization.grid_columns: must be >= 1")
    return p


def _num(x: Any) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _resolve_defaults(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fill the values whose default depends on other fields."""
    training = cfg.training
    if training.epochs is None:
        epochs = BACKBONE_EPOCHS.get(cfg.model.backbone, TEST_BACKBONE_EPOCHS)
        training = replace(training, epochs=epochs)
    if training.seed is None:
        training = replace(training, seed=cfg.seed_for("training"))
    aug = cfg.preprocess.augmentation
    if aug.seed is None:
        aug = replace(aug, seed=cfg.seed_for("preprocess"))
    model = cfg.model
    if model.init_seed is None:
        model = replace(model, init_seed=cfg.seed_for("models"))
    sg = cfg.attribution.smoothgrad
    if sg.seed is None:
        sg = replace(sg, seed=cfg.seed_for("attribution", "smoothgrad"))
    return replace(
        cfg,
        training=training,
        preprocess=replace(cfg.preprocess, augmentation=aug),
        model=model,
        attribution=replace(cfg.attribution, smoothgrad=sg),
    )


def config_from_dict(data: dict | None) -> ExperimentConfig:
    """Build, default and validate a config from a plain mapping."""
    problems: list[str] = []
    cfg = _build(ExperimentConfig, data or {}, "", problems)
    if problems:
        raise ConfigError(problems)
    problems = _validate(cfg)
    if problems:
        raise ConfigError(problems)
    return _resolve_defaults(cfg)


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def plain(obj: Any) -> Any:
        if isinstance(obj, dict):
            return {k: plain(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [plain(v) for v in obj]
        return obj

    return plain(dataclasses.asdict(cfg))


def echo_config(cfg: ExperimentConfig) -> str:
    """Canonical YAML text for ``cfg``: sorted keys, every default spelled out."""
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True, default_flow_style=False, allow_unicode=True)


def config_digest(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(echo_config(cfg).encode("utf-8")).hexdigest()


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """Apply dotted-key overrides (``{"training.epochs": 3}``) and re-validate.

    Per-module seeds that were derived from the old global seed are
    re-derived when ``seed`` is overridden.
    """
    data = config_to_dict(cfg)
    if "seed" in overrides and overrides["seed"] != cfg.seed:
        data["training"]["seed"] = None
        data["preprocess"]["augmentation"]["seed"] = None
        data["model"]["init_seed"] = None
        data["attribution"]["smoothgrad"]["seed"] = None
    if "model.backbone" in overrides and overrides["model.backbone"] != cfg.model.backbone \
            and "training.epochs" not in overrides:
        data["training"]["epochs"] = None
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node[part]
        node[leaf] = value
    return config_from_dict(data)


def resolve_output_dir(cfg: ExperimentConfig, flag: str | None = None) -> Path:
    """Output directory precedence: command-line flag, environment, config."""
    if flag:
        return Path(flag)
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env:
        return Path(env)
    return Path(cfg.output_dir)
