"""Distillation recovery: fuse all four stages and lift them to the teacher width."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from core import numerics
from core.backbone import StageOutputs
from core.errors import DimensionError
from core.layers import Linear


@dataclass(frozen=True)
class AlignedFeatures:
    tokens: torch.Tensor  # [B, 1+P, D]
    feature_map: torch.Tensor  # [B, D, h, w]
    class_token: torch.Tensor  # [B, D]


def tokens_to_map(tokens: torch.Tensor) -> AlignedFeatures:
    """Split off the class token and lay patch tokens out row-major on a square grid."""
    batch, length, dim = tokens.shape
    side = math.isqrt(length - 1)
    if side * side != length - 1:
        raise DimensionError(f"{length - 1} patch tokens do not form a square grid")
    patches = tokens[:, 1:, :].transpose(1, 2).reshape(batch, dim, side, side)
    return AlignedFeatures(tokens=tokens, feature_map=patches, class_token=tokens[:, 0, :])


class DistillationRecovery(nn.Module):
    """``Linear(Concat(X1, X2, X3, X4))`` in shallow-to-deep order."""

    def __init__(self, stage_dim: int, out_dim: int, *, stages: int = 4) -> None:
        super().__init__()
        self.stage_dim = stage_dim
        self.stages = stages
        self.proj = Linear(stages * stage_dim, out_dim)

    def forward(self, outputs: StageOutputs) -> AlignedFeatures:
        if len(outputs) != self.stages or outputs[0].shape[-1] != self.stage_dim:
            raise DimensionError(
                f"DRM expects {self.stages} stages of width {self.stage_dim}, "
                f"got {len(outputs)} of shape {tuple(outputs[0].shape)}"
            )
        fused = torch.cat(list(outputs.stages), dim=-1)
        return tokens_to_map(self.proj(fused))


class FinalStageProjection(nn.Module):
    """Ablation baseline: project only the last stage to the teacher width."""

    def __init__(self, stage_dim: int, out_dim: int) -> None:
        super().__init__()
        self.stage_dim = stage_dim
        self.proj = Linear(stage_dim, out_dim)

    def forward(self, outputs: StageOutputs) -> AlignedFeatures:
        if outputs.final.shape[-1] != self.stage_dim:
            raise DimensionError(
                f"projection expects width {self.stage_dim}, got {tuple(outputs.final.shape)}"
            )
        return tokens_to_map(self.proj(outputs.final))


def drm_forward(outputs: StageOutputs, weight: torch.Tensor, bias: torch.Tensor) -> AlignedFeatures:
    """Functional form of :class:`DistillationRecovery` with explicit weights."""
    expected = weight.shape[0]
    fused = torch.cat(list(outputs.stages), dim=-1)
    if fused.shape[-1] != expected:
        raise DimensionError(
            f"DRM weight {tuple(weight.shape)} does not match concatenated stages {tuple(fused.shape)}"
        )
    return tokens_to_map(numerics.linear(fused, weight, bias))


__all__ = [
    "AlignedFeatures",
    "DistillationRecovery",
    "FinalStageProjection",
    "drm_forward",
    "tokens_to_map",
]
