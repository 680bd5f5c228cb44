"""Configuration settings for the place-recognition pipeline"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

from core.errors import ConfigurationError

NUM_STAGES = 4
NUM_REGIONS = 14  # 1 global + 2x2 medium + 3x3 small
DEFAULT_SEED = 0
DEFAULT_PRESET = "toy"

# Training presets at full scale
DISTILL_BATCH_SIZE = 8
DISTILL_LR = 2.5e-5
FINETUNE_BATCH_SIZE = 128
FINETUNE_LR = 2e-4
IMAGES_PER_PLACE = 4
FINETUNE_PLACES_PER_BATCH = FINETUNE_BATCH_SIZE // IMAGES_PER_PLACE
FREEZE_FRACTION = 0.75
ADAMW_WEIGHT_DECAY = 0.01
PCA_DIM = 4096

# Ground-truth thresholds used by the benchmarks
GEO_THRESHOLD_M = 25.0
NORDLAND_FRAME_TOLERANCE = 10
RECALL_NS = (1, 5, 10)


@dataclass(frozen=True)
class BackboneConfig:
    embed_dim: int
    depth: int = 12
    heads: int = 6
    mlp_ratio: float = 4.0
    patch_size: int = 14
    image_size: int = 224
    stages: int = NUM_STAGES
    adapter_enabled: bool = False
    adapter_rank: int = 256
    ln_eps: float = 1e-6

    def __post_init__(self) -> None:
        if self.embed_dim <= 0 or self.depth <= 0:
            raise ConfigurationError(
                f"backbone embed_dim/depth must be positive, got {self.embed_dim}/{self.depth}"
            )
        if self.depth % self.stages != 0:
            raise ConfigurationError(
                f"backbone depth {self.depth} is not divisible by {self.stages} stages"
            )
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} is not divisible by {self.heads} heads"
            )

    @property
    def blocks_per_stage(self) -> int:
        return self.depth // self.stages

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size


@dataclass(frozen=True)
class AggregatorConfig:
    dim: int
    generator_channels: int = 64
    # Sampling grid side per level: global, medium, small.
    grid_sizes: tuple[int, int, int] = (8, 4, 3)
    gem_p_init: float = 3.0
    gem_eps: float = 1e-6
    offset_bound: float = 0.5
    scale_bound: float = 0.5

    def __post_init__(self) -> None:
        if len(self.grid_sizes) != 3 or min(self.grid_sizes) < 2:
            raise ConfigurationError(
                f"aggregator grid_sizes must be three sides >= 2, got {self.grid_sizes}"
            )
        if self.gem_p_init <= 0:
            raise ConfigurationError(f"gem_p_init must be positive, got {self.gem_p_init}")


@dataclass(frozen=True)
class EncoderConfig:
    model_dim: int
    layers: int = 2
    heads: int = 16
    ff_dim: int = 2048
    enabled: bool = True
    ln_eps: float = 1e-6

    def __post_init__(self) -> None:
        if self.model_dim % self.heads != 0:
            raise ConfigurationError(
                f"encoder model_dim {self.model_dim} is not divisible by {self.heads} heads"
            )


@dataclass(frozen=True)
class ModelConfig:
    name: str
    student: BackboneConfig
    teacher: BackboneConfig
    aggregator: AggregatorConfig
    encoder: EncoderConfig
    use_drm: bool = True

    def __post_init__(self) -> None:
        student, teacher = self.student, self.teacher
        if student.image_size != teacher.image_size or student.patch_size != teacher.patch_size:
            raise ConfigurationError("student and teacher must share image_size and patch_size")
        if self.aggregator.dim != self.teacher.embed_dim or self.encoder.model_dim != self.teacher.embed_dim:
            raise ConfigurationError(
                f"aggregator/encoder width must equal teacher embed_dim {self.teacher.embed_dim}"
            )
        if self.student.grid_size < 3:
            raise ConfigurationError(
                f"feature map {self.student.grid_size}x{self.student.grid_size} "
                "is too small for the region pyramid"
            )

    @property
    def feature_dim(self) -> int:
        return self.teacher.embed_dim

    @property
    def descriptor_dim(self) -> int:
        return NUM_REGIONS * self.feature_dim


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 50.0
    margin: float = 0.5
    mining_eps: float = 0.1

    def __post_init__(self) -> None:
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigurationError(f"alpha/beta must be positive, got {self.alpha}/{self.beta}")
        if not 0.0 < self.margin < 1.0:
            raise ConfigurationError(f"margin must lie in (0, 1), got {self.margin}")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = DISTILL_LR
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in {"adam", "adamw"}:
            raise ConfigurationError(f"optimizer kind must be adam or adamw, got '{self.kind}'")
        if self.lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")


PAPER_MODEL = ModelConfig(
    name="paper",
    student=BackboneConfig(embed_dim=384, heads=6, adapter_enabled=True, adapter_rank=256),
    teacher=BackboneConfig(embed_dim=768, heads=12),
    aggregator=AggregatorConfig(dim=768),
    encoder=EncoderConfig(model_dim=768),
)

TOY_MODEL = ModelConfig(
    name="toy",
    student=BackboneConfig(
        embed_dim=16, depth=4, heads=2, image_size=56, adapter_enabled=True, adapter_rank=4
    ),
    teacher=BackboneConfig(embed_dim=32, depth=4, heads=4, image_size=56),
    aggregator=AggregatorConfig(dim=32, generator_channels=8),
    encoder=EncoderConfig(model_dim=32, layers=1, heads=4, ff_dim=64),
)

MODEL_PRESETS = {
    "toy": TOY_MODEL,
    "paper": PAPER_MODEL,
}

DISTILL_OPTIMIZER = OptimizerConfig(kind="adam", lr=DISTILL_LR)
FINETUNE_OPTIMIZER = OptimizerConfig(kind="adamw", lr=FINETUNE_LR, weight_decay=ADAMW_WEIGHT_DECAY)
DEFAULT_LOSS = LossConfig()


@dataclass(frozen=True)
class PaperReference:
    """Published parameter counts (raw units) and FLOPs at 224x224."""

    params: dict[str, float] = field(
        default_factory=lambda: {
            "adapter": 2.30e6,
            "backbone": 22.16e6,
            "drm": 1.17e6,
            "aggregator": 1.58e6,
            "encoder": 11.03e6,
            "total_no_encoder": 27.21e6,
            "total": 38.24e6,
        }
    )
    flops: dict[str, float] = field(
        default_factory=lambda: {"no_encoder": 9.05e9, "encoder": 9.14e9}
    )
    descriptor_dim: int = 10752
    reduced_dim: int = PCA_DIM


PAPER_REFERENCE = PaperReference()


def resolve_model_preset(name: str | None = None, **overrides) -> ModelConfig:
    resolved = (name or os.environ.get("VPR_PRESET") or DEFAULT_PRESET).lower()
    if resolved not in MODEL_PRESETS:
        raise ConfigurationError(
            f"Unknown model preset '{resolved}' (choose from {sorted(MODEL_PRESETS)})"
        )
    base = MODEL_PRESETS[resolved]
    if overrides:
        return replace(base, **overrides)
    return base
