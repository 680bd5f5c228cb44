"""Loader for run configuration files (YAML or JSON)."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from config.settings import (
    ADAMW_WEIGHT_DECAY,
    DEFAULT_PRESET,
    DEFAULT_SEED,
    DISTILL_BATCH_SIZE,
    DISTILL_LR,
    FINETUNE_LR,
    FREEZE_FRACTION,
    GEO_THRESHOLD_M,
    MODEL_PRESETS,
    NORDLAND_FRAME_TOLERANCE,
    RECALL_NS,
)
from core.errors import ConfigurationError

ENV_OVERRIDES = {
    "VPR_SEED": "seed",
    "VPR_PRESET": "model.preset",
    "VPR_EVAL_BATCH": "eval.batch_size",
}


@dataclass(frozen=True)
class ModelSection:
    preset: str = DEFAULT_PRESET
    use_drm: bool = True
    aggregator_mode: str = "deformable"


@dataclass(frozen=True)
class DataSection:
    num_places: int = 32
    images_per_place: int = 6
    shift_px: int = 3
    brightness: float = 0.15
    noise_std: float = 0.05


@dataclass(frozen=True)
class DistillSection:
    lr: float = DISTILL_LR
    batch_size: int = DISTILL_BATCH_SIZE
    epochs: int = 1
    target: str = "tokens"


@dataclass(frozen=True)
class FinetuneSection:
    lr: float = FINETUNE_LR
    weight_decay: float = ADAMW_WEIGHT_DECAY
    places_per_batch: int = 8
    epochs: int = 1
    freeze_fraction: float = FREEZE_FRACTION
    use_encoder: bool = True


@dataclass(frozen=True)
class EvalSection:
    batch_size: int = 8
    use_encoder: bool = True
    pca_dim: int = 0
    whiten: bool = False
    ground_truth: str = "geo"
    dist_m: float = GEO_THRESHOLD_M
    heading_deg: float | None = None
    frames: int = NORDLAND_FRAME_TOLERANCE
    recall_ns: tuple[int, ...] = RECALL_NS


@dataclass(frozen=True)
class RunConfig:
    seed: int = DEFAULT_SEED
    workdir: str = "runs/toy"
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    distill: DistillSection = field(default_factory=DistillSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


SECTIONS = {
    "model": ModelSection,
    "data": DataSection,
    "distill": DistillSection,
    "finetune": FinetuneSection,
    "eval": EvalSection,
}


def _coerce(key: str, value: Any, default: Any) -> Any:
    if value is None:
        if default is None:
            return None
        raise ConfigurationError(f"{key} must not be null")
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered not in {"true", "false", "1", "0", "yes", "no"}:
                    raise ValueError(value)
                return lowered in {"true", "1", "yes"}
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float) or default is None:
            return float(value)
        if isinstance(default, tuple):
            items = value.split(",") if isinstance(value, str) else list(value)
            return tuple(int(item) for item in items)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{key} has invalid value {value!r}") from None


def _build_section(name: str, cls, payload: Any, base):
    if payload is None:
        return base
    if not isinstance(payload, dict):
        raise ConfigurationError(f"section '{name}' must be a mapping, got {payload!r}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigurationError(f"unknown key '{name}.{unknown[0]}'")
    updates = {k: _coerce(f"{name}.{k}", v, getattr(base, k)) for k, v in payload.items()}
    return replace(base, **updates)


def _from_mapping(data: dict[str, Any], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    unknown = sorted(set(data) - {f.name for f in fields(RunConfig)})
    if unknown:
        raise ConfigurationError(f"unknown key '{unknown[0]}'")
    updates: dict[str, Any] = {}
    for name, cls in SECTIONS.items():
        if name in data:
            updates[name] = _build_section(name, cls, data[name], getattr(base, name))
    for key in ("seed", "workdir"):
        if key in data:
            updates[key] = _coerce(key, data[key], getattr(base, key))
    return replace(base, **updates)


def apply_override(cfg: RunConfig, assignment: str) -> RunConfig:
    """Apply one ``section.key=value`` (or ``key=value``) override."""
    if "=" not in assignment:
        raise ConfigurationError(f"override '{assignment}' must look like section.key=value")
    dotted, raw = assignment.split("=", 1)
    parts = dotted.strip().split(".")
    if len(parts) == 1:
        return _from_mapping({parts[0]: raw}, cfg)
    if len(parts) == 2:
        return _from_mapping({parts[0]: {parts[1]: raw}}, cfg)
    raise ConfigurationError(f"override key '{dotted}' is nested too deeply")


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.model.preset not in MODEL_PRESETS:
        raise ConfigurationError(f"model.preset '{cfg.model.preset}' is not one of {sorted(MODEL_PRESETS)}")
    if cfg.model.aggregator_mode not in {"deformable", "identity"}:
        raise ConfigurationError(f"model.aggregator_mode has invalid value {cfg.model.aggregator_mode!r}")
    if cfg.distill.target not in {"tokens", "descriptor", "both"}:
        raise ConfigurationError(f"distill.target has invalid value {cfg.distill.target!r}")
    if cfg.eval.ground_truth not in {"geo", "frame", "unique"}:
        raise ConfigurationError(f"eval.ground_truth has invalid value {cfg.eval.ground_truth!r}")
    for key, value in (
        ("distill.batch_size", cfg.distill.batch_size),
        ("distill.epochs", cfg.distill.epochs),
        ("finetune.epochs", cfg.finetune.epochs),
        ("eval.batch_size", cfg.eval.batch_size),
        ("data.num_places", cfg.data.num_places),
    ):
        if value < 1:
            raise ConfigurationError(f"{key} must be at least 1, got {value}")
    if cfg.finetune.places_per_batch < 2:
        raise ConfigurationError(
            f"finetune.places_per_batch must be at least 2, got {cfg.finetune.places_per_batch}"
        )
    if cfg.data.images_per_place < 2:
        raise ConfigurationError(f"data.images_per_place must be at least 2, got {cfg.data.images_per_place}")
    if cfg.eval.pca_dim < 0:
        raise ConfigurationError(f"eval.pca_dim must be non-negative, got {cfg.eval.pca_dim}")
    if cfg.seed < 0:
        raise ConfigurationError(f"seed must be non-negative, got {cfg.seed}")
    return cfg


def load_run_config(
    path: str | Path | None = None,
    overrides: list[str] | None = None,
    *,
    environ: dict[str, str] | None = None,
) -> RunConfig:
    """File values, then ``VPR_*`` environment overrides, then ``--set`` overrides."""
    cfg = RunConfig()
    if path is not None:
        src = Path(path)
        if not src.exists():
            raise ConfigurationError(f"run config not found at {src}")
        text = src.read_text(encoding="utf-8")
        data = json.loads(text) if src.suffix == ".json" else yaml.safe_load(text)
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigurationError(f"{src}: top level must be a mapping")
        cfg = _from_mapping(data, cfg)
    env = os.environ if environ is None else environ
    for var, key in ENV_OVERRIDES.items():
        if env.get(var):
            cfg = apply_override(cfg, f"{key}={env[var]}")
    for assignment in overrides or []:
        cfg = apply_override(cfg, assignment)
    return validate(cfg)


__all__ = [
    "DataSection",
    "DistillSection",
    "ENV_OVERRIDES",
    "EvalSection",
    "FinetuneSection",
    "ModelSection",
    "RunConfig",
    "apply_override",
    "load_run_config",
    "validate",
]
