"""Student and teacher models assembled from backbone, DRM, aggregator and encoder."""

from __future__ import annotations

import logging

import torch
from torch import nn

from config.settings import ModelConfig
from core.backbone import Backbone, StageOutputs
from core.drm import AlignedFeatures, DistillationRecovery, FinalStageProjection, tokens_to_map
from core.encoder import CrossImageEncoder, Descriptor, assemble_descriptor
from core.tdda import DeformableAggregator, RegionDescriptorSet

logger = logging.getLogger(__name__)


class PlaceModel(nn.Module):
    """Student: backbone at D/2, DRM up to D, deformable aggregator, cross-image encoder."""

    def __init__(self, cfg: ModelConfig, *, aggregator_mode: str = "deformable") -> None:
        super().__init__()
        self.cfg = cfg
        self.aggregator_mode = aggregator_mode
        self.backbone = Backbone(cfg.student)
        if cfg.use_drm:
            self.drm: nn.Module = DistillationRecovery(
                cfg.student.embed_dim, cfg.feature_dim, stages=cfg.student.stages
            )
        else:
            self.drm = FinalStageProjection(cfg.student.embed_dim, cfg.feature_dim)
        self.aggregator = DeformableAggregator(cfg.aggregator)
        self.encoder = CrossImageEncoder(cfg.encoder)

    def stages(self, images: torch.Tensor) -> StageOutputs:
        return self.backbone(images)

    def aligned(self, images: torch.Tensor) -> AlignedFeatures:
        return self.drm(self.stages(images))

    def forward_tokens(self, images: torch.Tensor) -> torch.Tensor:
        """DRM output [B, 1+P, D], the sequence matched against the teacher."""
        return self.aligned(images).tokens

    def regions(self, images: torch.Tensor) -> RegionDescriptorSet:
        return self.aggregator(self.aligned(images), self.aggregator_mode)

    def describe(self, images: torch.Tensor, *, use_encoder: bool = True) -> Descriptor:
        return assemble_descriptor(self.regions(images), self.encoder, use_encoder=use_encoder)

    def forward(self, images: torch.Tensor, use_encoder: bool = True) -> torch.Tensor:
        return self.describe(images, use_encoder=use_encoder).vector


class TeacherModel(nn.Module):
    """Full-width backbone with a fixed-grid aggregator; frozen once built."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.teacher)
        self.aggregator = DeformableAggregator(cfg.aggregator)
        self.encoder = CrossImageEncoder(cfg.encoder)
        self.requires_grad_(False)
        self.eval()

    def forward_tokens(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone(images).final

    @torch.no_grad()
    def describe(self, images: torch.Tensor, *, use_encoder: bool = True) -> Descriptor:
        regions = self.aggregator(tokens_to_map(self.forward_tokens(images)), "identity")
        return assemble_descriptor(regions, self.encoder, use_encoder=use_encoder)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.forward_tokens(images)


def _seeded(seed: int, factory):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def build_student(cfg: ModelConfig, *, seed: int = 0, aggregator_mode: str = "deformable") -> PlaceModel:
    model = _seeded(seed, lambda: PlaceModel(cfg, aggregator_mode=aggregator_mode))
    logger.info(
        "Built %s student (seed=%d, drm=%s, mode=%s)", cfg.name, seed, cfg.use_drm, aggregator_mode
    )
    return model


def build_teacher(cfg: ModelConfig, *, seed: int = 1) -> TeacherModel:
    return _seeded(seed, lambda: TeacherModel(cfg))


__all__ = ["PlaceModel", "TeacherModel", "build_student", "build_teacher"]
